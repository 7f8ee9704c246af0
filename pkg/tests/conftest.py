import contextlib

import numpy as np
import pytest

from dcur.pipelines import RunConfig, train_teacher

_ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def small_teacher():
    """A short PointMass teacher run shared by tests that only need some real data."""
    cfg = RunConfig("pointmass", "teacher", total_updates=3000, epoch_length=1000,
                    random_warmup_steps=500, test_episodes_per_epoch=2, seed=40)
    return train_teacher(cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


class _Outcome:
    detail = ""


@pytest.fixture
def acceptance(request):
    """Record a numbered acceptance criterion as PASS or FAIL for the summary."""
    results = request.config.stash.setdefault(_ACCEPTANCE, {})

    @contextlib.contextmanager
    def criterion(number, title):
        outcome = _Outcome()
        try:
            yield outcome
        except BaseException as err:
            results[number] = (title, False, f"{type(err).__name__}: {err}".splitlines()[0])
            print(f"FAIL criterion {number}: {title}")
            raise
        results[number] = (title, True, outcome.detail)
        print(f"PASS criterion {number}: {title} {outcome.detail}".rstrip())

    return criterion


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_ACCEPTANCE, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        title, ok, detail = results[number]
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {title}"
        terminalreporter.write_line(f"{line} ({detail})" if detail else line)
