import os
import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from paote.encoder import STATIC, EncoderConfig  # noqa: E402
from paote.model import ModelConfig  # noqa: E402
from synthetic import make_corpus  # noqa: E402

DATA_DIR = Path(os.environ.get("PAOTE_DATA_DIR", Path(__file__).resolve().parents[1] / "data"))


def tiny_config(**kw) -> ModelConfig:
    enc = dict(
        hidden_dim=4, pos_emb_dim=3, dep_label_emb_dim=3, n_layers=2, local_window=1,
        embedding_mode=STATIC, lm_dim=4, word_emb_dim=3,
    )
    enc.update(kw.pop("encoder", {}))
    base = dict(span_dim=4, width_emb_dim=3, pair_dim=3, dropout=0.0, max_span_width=3)
    base.update(kw)
    return ModelConfig(encoder=EncoderConfig(**enc), **base)


def overfit_configs(**train_kw):
    """Small static-mode model that memorizes a 50-sentence subset."""
    from paote.trainer import TrainConfig

    enc = EncoderConfig(
        hidden_dim=32, pos_emb_dim=16, dep_label_emb_dim=16, embedding_mode=STATIC, lm_dim=64, word_emb_dim=50,
    )
    train = dict(learning_rate=5e-3, batch_size=16, max_epochs=200, patience=200, target_f1=0.95, seed=13)
    train.update(train_kw)
    return ModelConfig(encoder=enc, span_dim=64, pair_dim=32, dropout=0.1), TrainConfig(**train)


@pytest.fixture
def synthetic_corpus():
    return make_corpus(30, seed=1)


@pytest.fixture(autouse=True)
def _default_dtype():
    prev = torch.get_default_dtype()
    yield
    torch.set_default_dtype(prev)


# ---------------------------------------------------------------------------
# acceptance summary: one line per criterion

_CRITERIA: dict[str, list[str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion this test belongs to")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    name = marker.args[0]
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _CRITERIA.setdefault(name, []).append(report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcomes in _CRITERIA.items():
        if all(o == "passed" for o in outcomes):
            status = "PASS"
        elif any(o == "failed" for o in outcomes):
            status = "FAIL"
        else:
            status = "SKIP"
        terminalreporter.write_line(f"[{status}] {name} ({len(outcomes)} checks)")
    terminalreporter.write_line(
        "[SUBSTITUTED] Published F1 results: large-LM fine-tuning is replaced by the property-based criteria above"
    )
