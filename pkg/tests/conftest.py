import json

import numpy as np
import pytest

from hcal.taxonomy import Taxonomy, balanced, from_dict


@pytest.fixture
def toy2():
    """fine {0,1} -> coarse 0, fine {2} -> coarse 1."""
    return Taxonomy(2, (3, 2), ((0, 0, 1),))


@pytest.fixture
def toy3():
    """8 fine -> 4 mid -> 2 top, fine i -> mid i // 2 -> top i // 4."""
    return balanced((8, 4, 2))


@pytest.fixture
def write_json(tmp_path):
    def _write(doc, name="tax.json"):
        p = tmp_path / name
        p.write_text(json.dumps(doc))
        return p

    return _write


def random_taxonomy(rng, sizes):
    """Random parent maps where every parent keeps at least one child."""
    parents = []
    for k in range(len(sizes) - 1):
        n_child, n_par = sizes[k], sizes[k + 1]
        row = list(range(n_par)) + list(rng.integers(0, n_par, n_child - n_par))
        rng.shuffle(row)
        parents.append([int(p) for p in row])
    return from_dict({"levels": len(sizes), "classes_per_level": list(sizes), "parents": parents})


def consistent_labels(rng, tax, n):
    fine = rng.integers(0, tax.size(1), n)
    return np.array([tax.chain(int(c)) for c in fine], dtype=np.int64)
