import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conceptloc.errors import ArgumentError, CapabilityError
from conceptloc.evaluation import (DistanceProvider, MetricReport, MockEmbeddingProvider,
                                   MockPerceptualDistance, build_providers, clip_i, clip_t,
                                   evaluate, kid, kid_subsets, lpips_diversity)
from conceptloc.trainer import generate_samples
from conceptloc.backbone import build_backbone
from conceptloc.conditioning import SINGLE_TEMPLATE, PAIR_TEMPLATE

from conftest import TINY


def kid_oracle(x, y):
    m, n, d = len(x), len(y), len(x[0])

    def k(a, b):
        return (sum(a[i] * b[i] for i in range(d)) / d + 1.0) ** 3

    xx = sum(k(x[i], x[j]) for i in range(m) for j in range(m) if i != j) / (m * (m - 1))
    yy = sum(k(y[i], y[j]) for i in range(n) for j in range(n) if i != j) / (n * (n - 1))
    xy = sum(k(x[i], y[j]) for i in range(m) for j in range(n)) / (m * n)
    return xx + yy - 2 * xy


def test_clip_i_examples():
    assert clip_i([[1.0, 2.0]], [[1.0, 2.0]]) == pytest.approx(1.0)
    assert clip_i([[1.0, 0.0]], [[1.0, 0.0], [0.0, 1.0]]) == pytest.approx(0.5)
    assert clip_i([[1.0, 0.0]], [[0.0, 3.0]]) == 0.0
    with pytest.raises(ArgumentError):
        clip_i([[0.0, 0.0]], [[1.0, 0.0]])


class FixedText(MockEmbeddingProvider):
    def __init__(self, vec):
        super().__init__()
        self.vec = np.asarray(vec, dtype=float)
        self.seen = []

    def embed_texts(self, texts):
        self.seen.extend(texts)
        return self.vec[None]


def test_clip_t_examples():
    v = np.array([0.3, -1.2, 2.0])
    assert clip_t(v[None], "photo of a <v> dog", ["<v>"], FixedText(v)) == pytest.approx(1.0)
    assert clip_t(-v[None], "photo of a <v> dog", ["<v>"], FixedText(v)) == pytest.approx(-1.0)
    emb = FixedText(v)
    clip_t(v[None], "photo of a <v> dog", ["<v>"], emb)
    assert emb.seen == ["photo of a dog"]


def test_clip_t_stripping_with_mock_text():
    emb = MockEmbeddingProvider()
    a = emb.embed_texts(["photo of a dog"])
    img = np.random.default_rng(0).normal(size=(3, emb.dim))
    assert clip_t(img, "photo of a <v> dog", ["<v>"], emb) == pytest.approx(
        clip_t(img, "photo of a dog", [], emb))
    assert not np.allclose(a, emb.embed_texts(["photo of a <v> dog"]))


def test_kid_examples():
    assert kid([[0.0], [0.0]], [[0.0], [0.0]]) == 0.0
    assert kid([[1.0], [1.0]], [[0.0], [0.0]]) == pytest.approx(7.0)
    with pytest.raises(ArgumentError):
        kid([[1.0]], [[0.0], [1.0]])


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6), m=st.integers(2, 6), n=st.integers(2, 6), d=st.integers(1, 4))
def test_kid_matches_triple_loop(seed, m, n, d):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(m, d)), rng.normal(size=(n, d))
    assert abs(kid(x, y) - kid_oracle(x.tolist(), y.tolist())) < 1e-10


def test_kid_symmetric_and_subsets():
    rng = np.random.default_rng(1)
    x, y = rng.normal(size=(30, 4)), rng.normal(1.0, size=(40, 4))
    assert kid(x, y) == pytest.approx(kid(y, x))
    mean, std = kid_subsets(x, y, subset_size=20, n_subsets=5)
    assert mean > 0 and std >= 0


class TableDistance(DistanceProvider):
    def __init__(self, table):
        self.table = table

    def distance(self, a, b):
        return self.table[frozenset((int(a), int(b)))]


def test_lpips_diversity_examples():
    prov = TableDistance({frozenset((0, 1)): 0.2, frozenset((0, 2)): 0.4, frozenset((1, 2)): 0.6})
    assert lpips_diversity([0, 1, 2], prov) == pytest.approx(0.4)
    img = np.full((8, 8, 3), 90, dtype=np.uint8)
    assert lpips_diversity([img, img.copy(), img.copy()], MockPerceptualDistance()) == 0
    with pytest.raises(ArgumentError):
        lpips_diversity([img], MockPerceptualDistance())
    with pytest.raises(CapabilityError):
        lpips_diversity([img, img], None)


def test_mock_distance_is_metric_like():
    rng = np.random.default_rng(0)
    a, b = (rng.integers(0, 256, (16, 16, 3), dtype=np.uint8) for _ in range(2))
    d = MockPerceptualDistance()
    assert d.distance(a, b) == pytest.approx(d.distance(b, a))
    assert d.distance(a, b) > 0


def test_unknown_provider():
    with pytest.raises(CapabilityError):
        build_providers({"embedding": "nope"})


def test_evaluate_toy_run(shapes_manifest, tmp_path):
    bb = build_backbone(TINY)
    generate_samples(bb, shapes_manifest, ["red_square"], tmp_path, 2, 0, [SINGLE_TEMPLATE])
    generate_samples(bb, shapes_manifest, ["red_square", "blue_circle"], tmp_path, 2, 0, [PAIR_TEMPLATE])
    report = evaluate(tmp_path, shapes_manifest, build_providers())
    assert [r["concept"] for r in report.rows] == ["red_square", "red_square+blue_circle"]
    for r in report.rows:
        for c in ("clip_i", "clip_t", "kid", "lpips_diversity"):
            assert np.isfinite(r[c])
    csv_path, md_path = report.write(tmp_path / "eval")
    assert csv_path.read_text().count("\n") == 3
    assert "mock-embedding" in md_path.read_text()


def test_report_rejects_out_of_range():
    from conceptloc.errors import ValidationError

    bad = MetricReport([{"concept": "a", "kind": "single", "n_generated": 1, "n_real": 1,
                         "clip_i": 1.5, "clip_t": 0, "kid": 0, "lpips_diversity": 0}])
    with pytest.raises(ValidationError):
        bad.validate()
