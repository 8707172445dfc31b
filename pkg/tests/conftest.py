import datetime

import numpy as np
import pytest

from catalog import Catalog, ImageRecord


@pytest.fixture
def rng():
    return np.random.default_rng(20240501)


@pytest.fixture
def write_file(tmp_path):
    def _write(text, name="metadata.csv"):
        path = tmp_path / name
        path.write_text(text, encoding="utf-8")
        return path
    return _write


def build_catalog(counts, days=None, name="cat"):
    """``counts`` maps identity -> image count; ``days`` maps image_id -> ISO date."""
    records = []
    for identity, n in counts.items():
        for j in range(n):
            image_id = f"{identity}-{j}"
            stamp = None
            if days is not None and image_id in days:
                stamp = datetime.date.fromisoformat(days[image_id])
            records.append(ImageRecord(image_id, identity, name, stamp))
    return Catalog(name, tuple(records))


@pytest.fixture
def make_catalog():
    return build_catalog


def unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return (x / np.linalg.norm(x, axis=1, keepdims=True)).astype(np.float32)
