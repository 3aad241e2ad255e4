"""Command-line orchestration: ``python -m rcbf {verify,oracle,compare,slice}``.

A run is described by one JSON config. Every default is materialized into the
resolved config, which is embedded in each output so runs are self-describing.
The worker count is kept out of ``cells.json`` so that file is byte-identical
for any number of workers.
"""

from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import math
import os
import sys
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import oracle as orc
from .conditions import RcbfParams
from .dynamics import SYSTEMS, dubins_domain, estimate_lipschitz, make_system
from .geometry import SAFE, UNSAFE, Domain, Partition
from .sets import unsafe_from_json
from .verifier import VerifierConfig, verify_region


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "seed": 0,
    "workers": 1,
    "rcbf": {"alpha": 0.05, "beta": 0.05, "eps_int": None, "L": None, "M": None, "estimate_bounds": False},
    "verifier": {"n_s": 500, "n_seg": 5, "max_stage3_iters": 50, "root_radius": None},
    "oracle": {"grid_res": 61, "n_controls": 5, "dt": None, "tau": None, "outside": "escape", "scheme": "rk4"},
}


@dataclass
class RunConfig:
    raw: dict
    domain: Domain
    field: object
    verifier: VerifierConfig
    workers: int

    def resolved(self, with_workers: bool = True) -> dict:
        out = copy.deepcopy(self.raw)
        if not with_workers:
            out.pop("workers", None)
        return out


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def resolve_config(raw: dict, seed=None, workers=None, stage3_iters=None) -> RunConfig:
    """Validate a config document and fill in every default."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    cfg = _merge(DEFAULTS, raw)
    if seed is not None:
        cfg["seed"] = int(seed)
    if workers is not None:
        cfg["workers"] = int(workers)
    if stage3_iters is not None:
        cfg["verifier"]["max_stage3_iters"] = int(stage3_iters)

    system = cfg.get("system")
    if not isinstance(system, dict) or not system.get("name"):
        raise ConfigError("config needs system.name")
    if system["name"] not in SYSTEMS:
        raise ConfigError(f"unknown system {system['name']!r}; known: {sorted(SYSTEMS)}")
    system.setdefault("params", {})
    if system["name"] == "dubins3d":
        system["params"].setdefault("v", 5.0)

    if "domain" not in cfg:
        if system["name"] != "dubins3d":
            raise ConfigError("config needs a domain for this system")
        cfg["domain"] = dubins_domain().to_json()
    try:
        domain = Domain.from_json(cfg["domain"])
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"bad domain: {e}") from None
    cfg["domain"] = domain.to_json()

    try:
        fld = make_system(system["name"], system["params"], domain)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad system parameters: {e}") from None
    if fld.n != domain.ndim:
        raise ConfigError(f"system dimension {fld.n} does not match domain dimension {domain.ndim}")

    if "unsafe_set" not in cfg:
        raise ConfigError("config needs an unsafe_set")
    try:
        unsafe = unsafe_from_json(cfg["unsafe_set"])
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"bad unsafe_set: {e}") from None
    cfg["unsafe_set"] = unsafe.to_json()

    rc = cfg["rcbf"]
    if "tau" not in rc:
        raise ConfigError("config needs rcbf.tau")
    rc.setdefault("dt", rc["tau"] / 100.0 if rc["tau"] > 0 else 0.01)
    if rc["estimate_bounds"]:
        L, M = estimate_lipschitz(fld, domain, seed=cfg["seed"])
        fld = fld.with_bounds(L, M)
    if rc["L"] is not None or rc["M"] is not None:
        fld = fld.with_bounds(
            rc["L"] if rc["L"] is not None else fld.lipschitz,
            rc["M"] if rc["M"] is not None else fld.speed,
            certified=False,
        )
    if fld.lipschitz is None or fld.speed is None:
        raise ConfigError("field bounds missing and estimation disabled")
    rc["L"], rc["M"] = fld.lipschitz, fld.speed
    rc["bounds_certified"] = fld.certified
    try:
        params = RcbfParams(
            tau=float(rc["tau"]), alpha=float(rc["alpha"]), beta=float(rc["beta"]),
            L=float(rc["L"]), M=float(rc["M"]), dt=float(rc["dt"]), eps_int=rc["eps_int"],
        )
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad rcbf parameters: {e}") from None
    rc["eps_int"] = params.eps_int

    vc = cfg["verifier"]
    if "r_min" not in vc:
        raise ConfigError("config needs verifier.r_min")
    try:
        ver = VerifierConfig(
            r_min=float(vc["r_min"]), n_s=int(vc["n_s"]), n_seg=int(vc["n_seg"]), unsafe_set=unsafe,
            params=params, seed=int(cfg["seed"]), max_stage3_iters=int(vc["max_stage3_iters"]),
            root_radius=vc["root_radius"], workers=int(cfg["workers"]),
        )
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad verifier parameters: {e}") from None

    oc = cfg["oracle"]
    if oc["dt"] is None:
        oc["dt"] = params.dt
    if oc["tau"] is None:
        oc["tau"] = params.tau
    if oc["outside"] not in orc.OUTSIDE_POLICIES:
        raise ConfigError(f"oracle.outside must be one of {orc.OUTSIDE_POLICIES}")
    if oc["scheme"] not in orc.SCHEMES:
        raise ConfigError(f"oracle.scheme must be one of {orc.SCHEMES}")
    return RunConfig(cfg, domain, fld, ver, ver.workers)


def load_config(path, **overrides) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read config: {e}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from None
    return resolve_config(raw, **overrides)


# -- output helpers -------------------------------------------------------------


def _clean(obj):
    if isinstance(obj, float):
        return None if not math.isfinite(obj) else obj
    if isinstance(obj, (np.floating,)):
        return _clean(float(obj))
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return [_clean(x) for x in obj.tolist()]
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(x) for x in obj]
    return obj


def dumps(obj) -> str:
    return json.dumps(_clean(obj), sort_keys=True, indent=1, ensure_ascii=False, allow_nan=False) + "\n"


def write_atomic(path, data) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"encoding": "utf-8", "newline": ""})) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, obj) -> None:
    write_atomic(path, dumps(obj))


def read_cells(path) -> tuple[dict, Partition]:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    domain = Domain.from_json(doc["config"]["domain"])
    return doc, Partition.from_json(domain, doc["cells"])


def read_oracle(bin_path) -> orc.GridValueField:
    bin_path = Path(bin_path)
    side = json.loads(_sidecar(bin_path).read_text(encoding="utf-8"))
    return orc.from_bytes(bin_path.read_bytes(), side)


# -- subcommands ----------------------------------------------------------------


def run_verify(config_path, out_dir, seed=None, workers=None, stage3_iters=None) -> int:
    rc = load_config(config_path, seed=seed, workers=workers, stage3_iters=stage3_iters)
    t0 = time.perf_counter()
    res = verify_region(rc.domain, rc.field, rc.verifier)
    wall = time.perf_counter() - t0
    out = Path(out_dir)
    write_json(out / "cells.json", {"config": rc.resolved(with_workers=False), "cells": res.partition.to_json()})
    # a split child keeps its parent's certificates, which name the parent cell and ball
    certs = [
        {"cell_id": cid, "witnesses": [c.to_json() for c in res.certificates[cid]]} for cid in sorted(res.certificates)
    ]
    write_json(out / "certificates.json", {"config": rc.resolved(), "certificates": certs})
    write_json(out / "reports.json", {
        "config": rc.resolved(),
        "workers": rc.workers,
        "wall_time": wall,
        "bounds_certified": rc.field.certified,
        "stages": [r.to_json() for r in res.reports],
        "safe_volume": res.partition.volume(SAFE),
        "unsafe_volume": res.partition.volume(UNSAFE),
        "cells": len(res.partition.cells),
    })
    return 0


def run_oracle(config_path, out_dir, seed=None) -> int:
    rc = load_config(config_path, seed=seed)
    oc = rc.raw["oracle"]
    t0 = time.perf_counter()
    field = orc.brute_force_brt(
        rc.field, rc.verifier.unsafe_set, rc.domain, float(oc["tau"]), oc["grid_res"],
        int(oc["n_controls"]), float(oc["dt"]), oc["outside"], oc["scheme"],
    )
    field.meta["config"] = rc.resolved(with_workers=False)
    field.meta["wall_time"] = time.perf_counter() - t0
    out = Path(out_dir)
    write_atomic(out / "oracle.bin", orc.to_bytes(field))
    write_json(out / "oracle.json", field.to_json())
    return 0


def compare(partition: Partition, oracle: orc.GridValueField) -> dict:
    hit = orc.captured(partition, oracle)
    frac = float(hit.mean()) if hit.size else math.nan
    vol = oracle.brt_volume()
    return {
        "containment_fraction": frac,
        "volume_gap": orc.volume_gap(partition, oracle) if vol > 0 else math.nan,
        "unsafe_volume": partition.volume(UNSAFE),
        "safe_volume": partition.volume(SAFE),
        "oracle_brt_volume": vol,
        "oracle_brt_nodes": int(hit.size),
        "oracle_nodes_captured": int(hit.sum()),
    }


def _sidecar(oracle_path: Path) -> Path:
    return oracle_path.with_suffix(".json")


def run_compare(cells_path, oracle_path, out_dir) -> int:
    doc, part = read_cells(cells_path)
    oracle_path = Path(oracle_path)
    oracle = read_oracle(oracle_path)
    metrics = compare(part, oracle)
    metrics["config"] = doc["config"]
    metrics["oracle"] = {k: v for k, v in oracle.to_json().items() if k != "meta"}
    reports = Path(cells_path).with_name("reports.json")
    if reports.exists():
        rep = json.loads(reports.read_text(encoding="utf-8"))
        metrics["timings"] = {
            "wall_time": rep.get("wall_time"), "workers": rep.get("workers"),
            "stages": [s.get("wall_time") for s in rep.get("stages", [])],
        }
    write_json(Path(out_dir) / "metrics.json", metrics)
    return 0


def slice_labels(partition: Partition, axis: int, value: float, resolution: int = 200):
    """Raster of labels on the plane ``x[axis] = value``; returns (x, y, labels)."""
    d = partition.domain
    if d.ndim != 3:
        raise ConfigError("slices are defined for three-dimensional domains")
    if not 0 <= axis < 3:
        raise ConfigError("axis must be 0, 1 or 2")
    if not d.periodic_mask[axis] and not d.lower[axis] <= value <= d.upper[axis]:
        raise ConfigError("slice value lies outside the domain")
    a, b = [i for i in range(3) if i != axis]
    xs = d.lower[a] + d.extent[a] * (np.arange(resolution) + 0.5) / resolution
    ys = d.lower[b] + d.extent[b] * (np.arange(resolution) + 0.5) / resolution
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    pts = np.empty((X.size, 3))
    pts[:, a], pts[:, b], pts[:, axis] = X.ravel(), Y.ravel(), value
    unsafe = partition.locate(pts, UNSAFE)
    labels = np.where(unsafe, UNSAFE, SAFE)
    return pts[:, a], pts[:, b], labels


def export_slice(cells_path, axis: int, value: float, out_csv, resolution: int = 200) -> int:
    _, part = read_cells(cells_path)
    x, y, lab = slice_labels(part, axis, value, resolution)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["x", "y", "label"])
    for xi, yi, li in zip(x, y, lab):
        w.writerow([repr(float(xi)), repr(float(yi)), li])
    write_atomic(out_csv, buf.getvalue())
    return 0


# -- entry point ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rcbf", description="Recurrent-set safety verification")
    sub = ap.add_subparsers(dest="command", required=True)
    v = sub.add_parser("verify", help="run the three-stage verifier")
    v.add_argument("--config", required=True)
    v.add_argument("--out", required=True)
    v.add_argument("--seed", type=int)
    v.add_argument("--workers", type=int)
    v.add_argument("--stage3-iters", type=int, dest="stage3_iters")
    o = sub.add_parser("oracle", help="compute the grid tube")
    o.add_argument("--config", required=True)
    o.add_argument("--out", required=True)
    o.add_argument("--seed", type=int)
    c = sub.add_parser("compare", help="compare a partition with an oracle field")
    c.add_argument("--cells", required=True)
    c.add_argument("--oracle", required=True, help="path to oracle.bin (sidecar oracle.json alongside)")
    c.add_argument("--out", required=True)
    s = sub.add_parser("slice", help="export a 2D label raster as CSV")
    s.add_argument("--cells", required=True)
    s.add_argument("--axis", type=int, default=2)
    s.add_argument("--value", type=float, default=float(np.pi))
    s.add_argument("--resolution", type=int, default=200)
    s.add_argument("--out", required=True, help="CSV path")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        if args.command == "verify":
            return run_verify(args.config, args.out, args.seed, args.workers, args.stage3_iters)
        if args.command == "oracle":
            return run_oracle(args.config, args.out, args.seed)
        if args.command == "compare":
            return run_compare(args.cells, args.oracle, args.out)
        return export_slice(args.cells, args.axis, args.value, args.out, args.resolution)
    except (ConfigError, ValueError, KeyError, OSError, json.JSONDecodeError) as e:
        sys.stdout.write(dumps({"error": str(e), "type": type(e).__name__, "command": args.command}))
        return 2


if __name__ == "__main__":
    sys.exit(main())
