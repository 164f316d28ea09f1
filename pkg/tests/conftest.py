import json
from collections import OrderedDict

import pytest

from rcfuse.cli import main

_CRITERIA = OrderedDict()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, name): acceptance criterion this test belongs to")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, name = mark.args
    entry = _CRITERIA.setdefault(n, {"name": name, "ok": True, "parts": 0, "notes": []})
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        entry["parts"] += 1
        if not rep.passed:
            entry["ok"] = False
        for key, val in rep.user_properties:
            if key == "note":
                entry["notes"].append(val)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        status = "PASS" if e["ok"] else "FAIL"
        notes = "; ".join(e["notes"])
        tr.write_line(f"criterion {n:2d} {status}  {e['name']}" + (f"  [{notes}]" if notes else ""))


def run_cli(*args, capsys=None, sink=None):
    """Run the CLI in-process; returns ``(exit code, parsed stdout JSON or text)``.

    stderr of the run lands in ``sink["err"]`` when a dict is given."""
    code = main([str(a) for a in args])
    if capsys is None:
        return code, None
    cap = capsys.readouterr()
    out = cap.out
    if sink is not None:
        sink["err"] = cap.err
    try:
        return code, json.loads(out)
    except json.JSONDecodeError:
        return code, out


@pytest.fixture
def cli(capsys):
    def _run(*args):
        return run_cli(*args, capsys=capsys, sink=_run.__dict__)
    _run.err = ""
    return _run


def scene_spec(schema="tj4d", n_per_instance=60, noise_sigma=0.0):
    """Three-object scene: a quadratic patch, a slanted plane and a sphere."""
    return {
        "objects": [
            {"shape": "quadratic", "extent": [100, 150, 220, 260], "rho": [0.5, 0.3, -0.2, 1.0, 0.5, 15.0]},
            {"shape": "plane", "extent": [350, 200, 450, 300], "depth": 20.0, "grad_u": 0.01, "grad_v": -0.005},
            {"shape": "sphere", "center": [2.0, 0.5, 12.0], "radius": 1.0},
        ],
        "radar": {"n_per_instance": n_per_instance, "noise_sigma": noise_sigma, "schema": schema},
    }


@pytest.fixture
def write_spec(tmp_path):
    def _write(spec=None, name="scene.json", **kw):
        path = tmp_path / name
        path.write_text(json.dumps(spec if spec is not None else scene_spec(**kw)))
        return path
    return _write
