import json
import time

import numpy as np
import pytest

_CRITERIA: dict[int, str] = {}


def record_criterion(number: int, ok: bool, detail: str):
    """Remember one acceptance line; printed in the terminal summary."""
    _CRITERIA[number] = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(_CRITERIA[number])


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        terminalreporter.write_line(_CRITERIA[n])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def fd_grad(f, x, h=1e-6):
    """Central finite-difference gradient of a scalar function of an array."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    """Full CLI protocol on the diffusion regime at 32x32 / 16x16 with default settings."""
    from pdelatent import cli
    from pdelatent import pipeline as P

    out = tmp_path_factory.mktemp("desk")
    t0 = time.time()
    steps = [["gen-data"], ["fit-map"], ["train-encoder"],
             ["train-diffusion", "--branch", "map"], ["train-diffusion", "--branch", "encoder"],
             ["evaluate", "--split", "val", "--branch", "map"],
             ["evaluate", "--split", "val", "--branch", "encoder"],
             ["select-branch"], ["evaluate", "--split", "test"], ["baselines", "--split", "test"]]
    for argv in steps:
        code = cli.main([*argv, "--out", str(out), "--regime", "diffusion", "--seed", "0"])
        assert code == 0, f"{argv} failed"
    elapsed = time.time() - t0
    run = cli.Run(out, P.load_config(out / "config.resolved.json"))
    branch = json.loads(run.decision().read_text())["branch"]
    return {"run": run, "branch": branch, "elapsed": elapsed}
