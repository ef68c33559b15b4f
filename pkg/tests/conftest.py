from __future__ import annotations

import pytest

from survpad.dataset import SynthConfig, build_protocol3, synth_dataset
from survpad.harness import LabelVault


def make_vault(seed: int = 0, distance: float = 3.0, n: int = 60) -> LabelVault:
    recs = synth_dataset(SynthConfig.separated(8, distance, n_bonafide=n, n_attack=n), seed)
    return LabelVault(build_protocol3(recs), {r.sample_id: r.label.as_int for r in recs},
                      {r.sample_id: r.feature for r in recs})


@pytest.fixture(scope="session")
def vault():
    return make_vault()


# one "PASS|FAIL name (seconds)" line per acceptance criterion, printed after the run
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
