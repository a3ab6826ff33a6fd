"""Shared full-scale synthetic benchmark and trained models.

Training is expensive, so models are built lazily once per session and
shared between the acceptance suite and the trained-model tests.
"""

import time

import pytest

from xdesc.config import TrainConfig
from xdesc.joint import train_bank
from xdesc.losses import LossConfig
from xdesc.pair import train_pair
from xdesc.synthetic import default_families, gen_dataset, gen_latents

N_TRAIN = 5000
N_TEST = 1000
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


class Bench:
    def __init__(self):
        self.families = default_families(0)
        self.train = gen_dataset(gen_latents(N_TRAIN, seed=1), self.families, noise_seed=2)
        self.test = gen_dataset(gen_latents(N_TEST, seed=3), self.families, noise_seed=4)
        self.names = self.train.names
        self._banks: dict = {}
        self._pairs: dict = {}

    def bank(self, variant="quadratic", alpha=0.1, embed_dim=128):
        """(bank, training seconds) with default training settings."""
        key = (variant, alpha, embed_dim)
        if key not in self._banks:
            start = time.process_time()
            bank = train_bank(self.train, loss_cfg=LossConfig(alpha=alpha, variant=variant),
                              train_cfg=TrainConfig(), embed_dim=embed_dim)
            self._banks[key] = (bank, time.process_time() - start)
        return self._banks[key]

    def pair(self, src, dst):
        key = (src, dst)
        if key not in self._pairs:
            start = time.process_time()
            model = train_pair(self.train, src, dst, TrainConfig())
            self._pairs[key] = (model, time.process_time() - start)
        return self._pairs[key]


@pytest.fixture(scope="session")
def bench():
    return Bench()


@pytest.fixture
def record():
    """Keep one acceptance criterion outcome for the summary block."""
    def _record(cid: str, ok: bool, detail: str) -> None:
        ACCEPTANCE[cid] = (ok, detail)
    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE, key=lambda c: int(c[1:])):
        ok, detail = ACCEPTANCE[cid]
        terminalreporter.write_line(f"{cid} {'PASS' if ok else 'FAIL'}: {detail}")
