import os
import time
from pathlib import Path

import numpy as np
import pytest

from advlic.codec import CodecModel, load_checkpoint, save_checkpoint, train_baseline
from advlic.config import QUALITY_LAMBDAS, AttackConfig, TrainingConfig
from advlic.defense import evaluate_robustness
from advlic.samples import test_batch, training_patches

# desk-scale recipe shared by the acceptance and trained-model property tests
RECIPE = TrainingConfig(batch_size=16, learning_rate=1e-3, max_epochs=300, patch_size=64, val_fraction=0.0, seed=0,
                        lr_decay_at=0.8)

ACCEPTANCE_LINES: list[str] = []


def report(criterion: str, ok: bool, detail: str) -> None:
    line = f"[{criterion}] {'PASS' if ok else 'FAIL'}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_patches():
    return training_patches(patch=32, tile=80).epoch(0)[:64]


@pytest.fixture(scope="session")
def quick_model(small_patches):
    """A factorized codec trained for a handful of epochs; enough for gradients to carry structure."""
    model = CodecModel.create("factorized", 650.25, seed=0)
    cfg = TrainingConfig(batch_size=16, learning_rate=1e-3, max_epochs=6, patch_size=32, lam=650.25,
                         val_fraction=0.0)
    train_baseline(model, small_patches, cfg)
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class TrainedModels:
    """Lazily trains (or loads from ADVLIC_MODEL_CACHE) one factorized codec per lambda grid point."""

    def __init__(self, cache: Path | None):
        self.cache = cache
        self.models: dict[str, CodecModel] = {}
        self.seconds: dict[str, float] = {}
        self.patches = training_patches(RECIPE.patch_size)
        self._robustness: dict = {}

    def __getitem__(self, quality: str) -> CodecModel:
        if quality not in self.models:
            lam = QUALITY_LAMBDAS[quality]
            path = self.cache / f"factorized_{quality}_{RECIPE.max_epochs}_d{RECIPE.lr_decay_at}.ckpt" if self.cache else None
            start = time.perf_counter()
            if path is not None and path.is_file():
                model = load_checkpoint(path)
            else:
                model = CodecModel.create("factorized", lam, seed=RECIPE.seed)
                train_baseline(model, self.patches, RECIPE.replace(lam=lam))
                if path is not None:
                    save_checkpoint(model, path)
            self.seconds[quality] = time.perf_counter() - start
            self.models[quality] = model
        return self.models[quality]

    def robustness(self, quality: str, target: str, test_set):
        """Default-PGD evaluation of one model on the test set, memoized: (summary, attack results, seconds)."""
        key = (quality, target)
        if key not in self._robustness:
            model = self[quality]
            start = time.perf_counter()
            results: list = []
            summary = evaluate_robustness(model, test_set, AttackConfig.default("pgd", target), model.lam,
                                          keep_results=results)
            self._robustness[key] = (summary, results, time.perf_counter() - start)
        return self._robustness[key]

    def training_note(self, *qualities: str) -> str:
        return "+".join(f"{self.seconds[q]:.0f}s" for q in qualities) + " to train/load"


@pytest.fixture(scope="session")
def trained():
    cache = os.environ.get("ADVLIC_MODEL_CACHE")
    if cache:
        Path(cache).mkdir(parents=True, exist_ok=True)
    return TrainedModels(Path(cache) if cache else None)


@pytest.fixture(scope="session")
def test_set():
    ids, x = test_batch()
    return list(zip(ids, x))
