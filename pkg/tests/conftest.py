import sys
import time
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from twosubnet_tal.harness import cli  # noqa: E402


class Tiny5Run:
    """One full CLI training run on the tiny5 preset, shared by the slow tests."""

    def __init__(self, root: Path):
        self.dir = root / "tiny5"
        t0 = time.perf_counter()
        assert cli.main(["train", "--preset", "tiny5", "--out", str(self.dir)]) == 0
        assert cli.main(["detect", "--run", str(self.dir)]) == 0
        assert cli.main(["eval", "--run", str(self.dir)]) == 0
        self.seconds = time.perf_counter() - t0
        self.detections = self.dir / "detections-test.jsonl"
        self.metrics = self.dir / "metrics-test.csv"
        self.manifest = self.dir / "manifest.json"
        self.history = self.dir / "history.jsonl"

    def map_at(self, threshold: float) -> float:
        lines = self.metrics.read_text().splitlines()
        head, row = lines[0].split(","), lines[1].split(",")
        return float(row[head.index(f"{threshold:g}")])


@pytest.fixture(scope="session")
def tiny5_run(tmp_path_factory):
    return Tiny5Run(tmp_path_factory.mktemp("runs"))
