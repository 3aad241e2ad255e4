import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from rcbf.cli import ConfigError, compare, dumps, main, read_cells, resolve_config, slice_labels
from rcbf.dynamics import dubins_domain
from rcbf.geometry import SAFE, UNSAFE, Partition
from rcbf.sets import Cylinder

R_MIN = 0.037

LINE_CFG = {
    "system": {"name": "integrator1d"},
    "domain": {"lower": [-1.0], "upper": [1.0]},
    "unsafe_set": {"shape": "box", "lo": [-0.2], "hi": [0.2]},
    "rcbf": {"tau": 1.0, "alpha": 1.0, "beta": 1.0},
    "verifier": {"r_min": R_MIN, "n_s": 20},
    "oracle": {"grid_res": 401},
}


@pytest.fixture(scope="module")
def line_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("line")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(LINE_CFG))
    out = root / "out"
    assert main(["verify", "--config", str(cfg), "--out", str(out)]) == 0
    assert main(["oracle", "--config", str(cfg), "--out", str(out)]) == 0
    assert main(["compare", "--cells", str(out / "cells.json"), "--oracle", str(out / "oracle.bin"),
                 "--out", str(out)]) == 0
    return root, cfg, out


def cylinder_partition(levels=3):
    """Dubins domain refined near the unit cylinder, cells touching it marked unsafe."""
    d = dubins_domain()
    part = Partition.from_domain(d)
    U = Cylinder((0, 1), (0, 0), 1.0)
    for _ in range(levels):
        for c in list(part.cells.values()):
            if np.hypot(*c.center[:2]) - c.radius * np.sqrt(2) <= 1.0:
                part.split(c.id)
    for c in part.cells.values():
        near = U.signed_distance(np.array([c.center]), d)[0] <= c.radius
        part.relabel(c.id, UNSAFE if near else SAFE)
    return part


def write_cells(path, part):
    path.write_text(dumps({"config": {"domain": part.domain.to_json()}, "cells": part.to_json()}))


class TestVerify:
    def test_outputs_written(self, line_run):
        _, _, out = line_run
        for name in ("cells.json", "certificates.json", "reports.json", "metrics.json", "oracle.bin", "oracle.json"):
            assert (out / name).exists()
        rep = json.loads((out / "reports.json").read_text())
        assert [s["stage"] for s in rep["stages"]] == [1, 2, 3]
        assert rep["workers"] == 1 and rep["wall_time"] > 0

    def test_every_safe_cell_has_witnesses(self, line_run):
        _, _, out = line_run
        _, part = read_cells(out / "cells.json")
        entries = json.loads((out / "certificates.json").read_text())["certificates"]
        held = {e["cell_id"]: e["witnesses"] for e in entries}
        assert sorted(held) == sorted(c.id for c in part.safe)
        for cid, ws in held.items():
            cell = part.cells[cid]
            assert {w["stage"] for w in ws} >= {2, 3}
            for w in ws:
                # the certified ball contains the holding cell
                gap = np.abs(np.array(w["center"]) - cell.center) + cell.radius
                assert np.all(gap <= w["radius"] + 1e-12)

    def test_defaults_materialized(self, line_run):
        _, _, out = line_run
        cfg = json.loads((out / "cells.json").read_text())["config"]
        assert cfg["rcbf"]["dt"] == pytest.approx(0.01)
        assert "workers" not in cfg
        assert cfg["seed"] == 0 and cfg["oracle"]["scheme"] == "rk4"

    def test_unsafe_interval_bounds(self, line_run):
        # stage 1 rounds the strip out to the cell lattice (up to 2 r per side) and
        # stage 2 adds at most one more floor layer on each side
        _, _, out = line_run
        _, part = read_cells(out / "cells.json")
        lo = min(c.center[0] - c.radius for c in part.unsafe)
        hi = max(c.center[0] + c.radius for c in part.unsafe)
        assert lo <= -0.2 and hi >= 0.2
        assert 0.4 < part.volume(UNSAFE) <= 0.4 + 8 * R_MIN + 1e-9
        assert part.volume(UNSAFE) == pytest.approx(hi - lo, abs=1e-12)

    def test_rerun_byte_identical(self, line_run, tmp_path):
        _, cfg, out = line_run
        assert main(["verify", "--config", str(cfg), "--out", str(tmp_path), "--workers", "2"]) == 0
        assert (tmp_path / "cells.json").read_bytes() == (out / "cells.json").read_bytes()

    def test_seed_flag_recorded(self, line_run, tmp_path):
        _, cfg, _ = line_run
        assert main(["verify", "--config", str(cfg), "--out", str(tmp_path), "--seed", "7"]) == 0
        assert json.loads((tmp_path / "cells.json").read_text())["config"]["seed"] == 7


class TestCompare:
    def test_metrics(self, line_run):
        _, _, out = line_run
        m = json.loads((out / "metrics.json").read_text())
        assert m["containment_fraction"] == 1.0
        assert m["oracle_brt_volume"] == pytest.approx(0.4, abs=2 * 2.0 / 400)
        assert m["volume_gap"] == pytest.approx((m["unsafe_volume"] - m["oracle_brt_volume"]) / m["oracle_brt_volume"])
        assert m["timings"]["workers"] == 1

    def test_matches_library(self, line_run):
        from rcbf.cli import read_oracle

        _, _, out = line_run
        _, part = read_cells(out / "cells.json")
        got = compare(part, read_oracle(out / "oracle.bin"))
        m = json.loads((out / "metrics.json").read_text())
        for k, v in got.items():
            assert m[k] == v


class TestErrors:
    def run_json(self, argv, capsys):
        code = main(argv)
        return code, json.loads(capsys.readouterr().out)

    def test_missing_system(self, tmp_path, capsys):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({k: v for k, v in LINE_CFG.items() if k != "system"}))
        code, err = self.run_json(["verify", "--config", str(cfg), "--out", str(tmp_path)], capsys)
        assert code == 2 and err["command"] == "verify"
        assert not (tmp_path / "cells.json").exists()

    def test_unknown_system(self):
        with pytest.raises(ValueError):
            resolve_config(dict(LINE_CFG, system={"name": "glider"}))

    def test_missing_file(self, tmp_path, capsys):
        code, err = self.run_json(["verify", "--config", str(tmp_path / "none.json"), "--out", str(tmp_path)], capsys)
        assert code == 2 and "none.json" in err["error"]

    def test_malformed_json(self, tmp_path, capsys):
        cfg = tmp_path / "broken.json"
        cfg.write_text("{not json")
        code, _ = self.run_json(["oracle", "--config", str(cfg), "--out", str(tmp_path)], capsys)
        assert code == 2

    def test_slice_needs_3d(self, line_run, tmp_path, capsys):
        _, _, out = line_run
        code, _ = self.run_json(["slice", "--cells", str(out / "cells.json"), "--out", str(tmp_path / "s.csv")], capsys)
        assert code == 2

    def test_module_entry_point(self, tmp_path):
        proc = subprocess.run([sys.executable, "-m", "rcbf", "compare", "--cells", str(tmp_path / "x.json"),
                               "--oracle", str(tmp_path / "o.bin"), "--out", str(tmp_path)],
                              capture_output=True, text=True)
        assert proc.returncode == 2
        assert json.loads(proc.stdout)["command"] == "compare"


class TestSlice:
    def test_all_safe_uniform(self):
        part = Partition.from_domain(dubins_domain())
        part.relabel(0, SAFE)
        _, _, lab = slice_labels(part, 2, np.pi, 20)
        assert set(lab) == {SAFE}

    def test_cylinder_disk_unsafe(self):
        part = cylinder_partition()
        x, y, lab = slice_labels(part, 2, np.pi, 120)
        disk = np.hypot(x, y) <= 1.0
        assert disk.any() and np.all(lab[disk] == UNSAFE)
        assert np.any(lab == SAFE)

    def test_raster_matches_direct_lookup(self, rng):
        # independent membership: some unsafe cell within its radius in the scaled norm
        part = cylinder_partition()
        d = part.domain
        x, y, lab = slice_labels(part, 2, 1.0, 80)
        pick = rng.choice(x.size, 1000, replace=False)
        cells = part.unsafe
        C = np.array([c.center for c in cells])
        r = np.array([c.radius for c in cells])
        for i in pick:
            p = np.array([x[i], y[i], 1.0])
            diff = np.abs(p - C)
            diff[:, 2] = np.minimum(diff[:, 2], 2 * np.pi - diff[:, 2])
            inside = np.any((diff / d.scale).max(axis=1) <= r + 1e-12)
            assert inside == (lab[i] == UNSAFE)

    def test_csv_export(self, tmp_path):
        part = cylinder_partition(2)
        write_cells(tmp_path / "cells.json", part)
        out = tmp_path / "slice.csv"
        assert main(["slice", "--cells", str(tmp_path / "cells.json"), "--axis", "2", "--value", "3.0",
                     "--resolution", "16", "--out", str(out)]) == 0
        rows = list(csv.reader(out.open()))
        assert rows[0] == ["x", "y", "label"] and len(rows) == 1 + 16 * 16
        assert {r[2] for r in rows[1:]} <= {SAFE, UNSAFE}

    def test_bad_axis(self):
        with pytest.raises(ConfigError):
            slice_labels(cylinder_partition(1), 3, 0.0)
