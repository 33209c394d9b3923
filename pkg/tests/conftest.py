import numpy as np
import pytest

from mlsl.bench import Dataset, DomainShiftSpec, SceneSpec, render_sample

SMALL_SCENE = SceneSpec(height=16, width=16, small_b_size=(4, 8))


def make_dataset(n, seed, shift=None, with_labels=True, scene=SMALL_SCENE):
    shift = shift or DomainShiftSpec.identity()
    pairs = [render_sample(scene, shift, seed, i) for i in range(n)]
    images = np.stack([p[0] for p in pairs])
    labels = np.stack([p[1] for p in pairs])
    return Dataset(images, labels if with_labels else None, [f"{i:05d}" for i in range(n)]), labels


@pytest.fixture
def tiny_domains():
    source, _ = make_dataset(6, 0)
    target, hidden = make_dataset(4, 1, DomainShiftSpec.default(), with_labels=False)
    val, _ = make_dataset(3, 2, DomainShiftSpec.default())
    return source, target, val, hidden


# criterion -> (passed, detail); filled by test_acceptance, printed after the run
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    order = sorted(ACCEPTANCE, key=lambda k: (int(k.rstrip("abcd")), k))
    for key in order:
        ok, detail = ACCEPTANCE[key]
        indent = "  " if key[-1].isalpha() else ""
        terminalreporter.write_line(f"{indent}criterion {key:<3} {'PASS' if ok else 'FAIL'}  {detail}")
