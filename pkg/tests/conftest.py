import time
from dataclasses import dataclass

import pytest
import torch

from tsftrack.data_io import generate_synthetic, synthetic_suite
from tsftrack.model import TSFSiam, load_checkpoint, save_checkpoint
from tsftrack.training import (TrainConfig, evaluate_stage1_loss, harvest_mu_tuples, make_pairs, mean_mu_loss,
                               train_stage1, train_stage2)

HARVEST_SEED = 4242
HELD_OUT_SEED = 999


@dataclass
class ToyRun:
    stage1_path: object
    stage2_path: object
    stage1_log: list
    stage2_log: list
    seconds: float
    held_identity_loss: float
    held_trained_loss: float
    stage1_initial_loss: float
    stage1_final_loss: float

    def stage1(self) -> TSFSiam:
        return load_checkpoint(self.stage1_path)

    def stage2(self) -> TSFSiam:
        return load_checkpoint(self.stage2_path)


@pytest.fixture(scope="session")
def toy_run(tmp_path_factory) -> ToyRun:
    """Seed-pinned two-stage training of the tiny variant on synthetic data.

    Shared by every test that needs trained weights, so the session pays
    for it once.
    """
    out = tmp_path_factory.mktemp("toy")
    t0 = time.perf_counter()
    torch.manual_seed(0)
    cfg = TrainConfig()
    model = TSFSiam()
    s1_log, s2_log = [], []
    pairs = make_pairs(cfg)
    initial = evaluate_stage1_loss(pairs[:64], model)
    train_stage1(pairs, cfg, model, s1_log)
    final = evaluate_stage1_loss(pairs[:64], model)
    save_checkpoint(model, out / "stage1.pt")

    seqs = [generate_synthetic(s) for s in synthetic_suite(cfg.mu_sequences, seed=HARVEST_SEED, prefix="mu")]
    tuples = harvest_mu_tuples(model, seqs)
    held = [generate_synthetic(s) for s in synthetic_suite(5, seed=HELD_OUT_SEED, prefix="held")]
    held_tuples = harvest_mu_tuples(model, held)
    identity = mean_mu_loss(model, held_tuples, identity=True)
    train_stage2(tuples, TrainConfig.stage2_defaults(), model, s2_log)
    trained = mean_mu_loss(model, held_tuples)
    save_checkpoint(model, out / "stage2.pt")
    return ToyRun(out / "stage1.pt", out / "stage2.pt", s1_log, s2_log, time.perf_counter() - t0,
                  identity, trained, initial, final)


# ---------------------------------------------------------------- acceptance summary

_CRITERIA = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    failed = report.failed
    skipped = report.skipped and report.when in ("setup", "call")
    if report.when == "call" or failed or skipped:
        prev = _CRITERIA.get(number, ("PASS", title, []))
        status = "FAIL" if failed or prev[0] == "FAIL" else "SKIP" if skipped else prev[0]
        details = [v for k, v in item.user_properties if k == "detail"]
        _CRITERIA[number] = (status, title, prev[2] + [d for d in details if d not in prev[2]])


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        status, title, details = _CRITERIA[number]
        extra = f"  [{'; '.join(details)}]" if details else ""
        terminalreporter.write_line(f"criterion {number}: {status}  {title}{extra}")
