import numpy as np
import pytest

from tailforge.exceptions import ConfigError
from tailforge.nnkernel import predict_logits
from tailforge.parallel import map_chunks, worker_threads

from conftest import make_params


class TestWorkerThreads:
    def test_default(self, monkeypatch):
        monkeypatch.delenv("TAILFORGE_THREADS", raising=False)
        assert worker_threads() == 1

    @pytest.mark.parametrize("raw", ["0", "-2", "four", ""])
    def test_invalid(self, monkeypatch, raw):
        monkeypatch.setenv("TAILFORGE_THREADS", raw)
        with pytest.raises(ConfigError):
            worker_threads()


class TestMapChunks:
    def test_order(self, monkeypatch):
        monkeypatch.setenv("TAILFORGE_THREADS", "4")
        assert map_chunks(lambda a, b: (a, b), 10, 3) == [(0, 3), (3, 6), (6, 9), (9, 10)]

    def test_empty(self):
        assert map_chunks(lambda a, b: a, 0, 4) == []

    def test_predictions_thread_independent(self, monkeypatch):
        p = make_params()
        x = np.random.default_rng(0).random((50, 12, 12))
        monkeypatch.setenv("TAILFORGE_THREADS", "1")
        one = predict_logits(p, x, batch_size=7)
        monkeypatch.setenv("TAILFORGE_THREADS", "4")
        four = predict_logits(p, x, batch_size=7)
        assert one.tobytes() == four.tobytes()
