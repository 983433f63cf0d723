import io
import math

import numpy as np
import pytest
from sklearn.base import clone

import oracles
from conftest import make_corpus
from legalsynth._base import DataError
from legalsynth.contrastive import (
    InfoNCEBatch,
    ToyEncoder,
    TrainingExample,
    infonce_grad,
    infonce_loss,
    mine_hard_negatives,
    read_examples,
    train_toy,
    write_examples,
    write_loss_trace,
)
from legalsynth.dense import DenseRetriever, pseudo_embed


class ListRetriever:
    def __init__(self, ranking):
        self.ranking = ranking

    def search(self, query, top_k=10):
        return [(p, 1.0 / (i + 1)) for i, p in enumerate(self.ranking[:top_k])]

    def has_passage(self, pid):
        return pid in self.ranking


class TestMining:
    def test_exclusion_rule(self):
        ex = mine_hard_negatives({"q": "t"}, {"q": {"pos"}}, ListRetriever(["pos", "a", "b", "c"]), ["pos", "a", "b", "c"], n_neg=2)
        assert ex == [TrainingExample("q", "pos", ("a", "b"))]

    def test_multi_positive(self):
        ranking = ["p1", "x", "p2", "y", "z"]
        ex = mine_hard_negatives({"q": "t"}, {"q": ["p1", "p2"]}, ListRetriever(ranking), ranking, n_neg=2)
        assert [(e.positive_id, e.hard_negative_ids) for e in ex] == [("p1", ("x", "y")), ("p2", ("x", "y"))]

    def test_injective_embedder_ranks(self):
        rng = np.random.default_rng(0)
        m = rng.standard_normal((30, 12))
        m /= np.linalg.norm(m, axis=1, keepdims=True)
        ids = [f"p{i:02d}" for i in range(30)]

        class VecRetriever:
            inner = DenseRetriever().set_matrix(m, ids)

            def search(self, query, top_k=10):
                return self.inner.search_vector(m[int(query)], top_k)

        for i in range(0, 30, 7):
            (ex,) = mine_hard_negatives({"q": str(i)}, {"q": {ids[i]}}, VecRetriever(), ids, n_neg=5)
            want = oracles.ranking((m @ m[i]).tolist(), ids, 6)
            assert want[0][0] == ids[i]
            assert list(ex.hard_negative_ids) == [p for p, _ in want[1:6]]

    def test_padding_is_seeded(self):
        ids = [f"p{i}" for i in range(10)]
        r = ListRetriever(["p0", "p1"])
        a = mine_hard_negatives({"q": "t"}, {"q": {"p0"}}, r, ids, n_neg=4, seed=3)
        b = mine_hard_negatives({"q": "t"}, {"q": {"p0"}}, r, ids, n_neg=4, seed=3)
        assert a == b
        negs = a[0].hard_negative_ids
        assert negs[0] == "p1" and len(set(negs)) == 4 and "p0" not in negs

    def test_corpus_too_small(self):
        with pytest.raises(DataError):
            mine_hard_negatives({"q": "t"}, {"q": {"a"}}, ListRetriever(["a", "b"]), ["a", "b"], n_neg=2)

    def test_bad_params(self):
        with pytest.raises(ValueError):
            mine_hard_negatives({}, {}, ListRetriever([]), [], n_neg=0)
        with pytest.raises(ValueError):
            mine_hard_negatives({}, {}, ListRetriever([]), [], n_neg=3, pool_depth=2)


class TestExample:
    def test_invariants(self):
        with pytest.raises(ValueError):
            TrainingExample("q", "a", ("a", "b"))
        with pytest.raises(ValueError):
            TrainingExample("q", "a", ("b", "b"))

    def test_round_trip(self):
        exs = [TrainingExample("q1", "p1", ("p2", "p3")), TrainingExample("q2", "p2", ("p1", "p3"), "zalo")]
        buf = io.StringIO()
        write_examples(exs, buf, meta={"seed": 0})
        assert read_examples(io.StringIO(buf.getvalue())) == exs


def _random_batch(rng, B=4, n=3, d=5, tau=1.0, in_batch=False):
    return InfoNCEBatch(rng.standard_normal((B, d)), rng.standard_normal((B, d)), rng.standard_normal((B, n, d)), tau, in_batch)


def _oracle_loss(q, p, n, tau, in_batch):
    total = 0.0
    for i in range(len(q)):
        cands = [p[i]] + ([p[j] for j in range(len(q)) if j != i] if in_batch else []) + list(n[i])
        sims = [sum(a * b for a, b in zip(q[i], c)) / tau for c in cands]
        total += -sims[0] + math.log(sum(math.exp(s) for s in sims))
    return total / len(q)


class TestLoss:
    def test_symmetric_seven_negatives(self):
        q = np.array([[1.0, 0.0]])
        p = np.array([[0.3, 0.5]])
        n = np.tile([[0.3, -0.2]], (1, 7, 1))
        assert abs(infonce_loss(InfoNCEBatch(q, p, n)) - math.log(8)) < 1e-9

    def test_one_negative(self):
        b = InfoNCEBatch(np.array([[1.0, 0]]), np.array([[1.0, 0]]), np.array([[[0, 1.0]]]))
        assert infonce_loss(b) == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-12)
        assert round(infonce_loss(b), 5) == 0.31326

    def test_no_negatives(self):
        b = InfoNCEBatch(np.ones((2, 3)), np.ones((2, 3)), np.zeros((2, 0, 3)))
        assert infonce_loss(b) == 0.0

    @pytest.mark.parametrize("in_batch", [False, True])
    def test_matches_oracle(self, in_batch):
        rng = np.random.default_rng(4)
        for _ in range(10):
            b = _random_batch(rng, tau=float(rng.uniform(0.3, 2)), in_batch=in_batch)
            want = _oracle_loss(b.queries.tolist(), b.positives.tolist(), b.negatives.tolist(), b.temperature, in_batch)
            assert abs(infonce_loss(b) - want) < 1e-9
            assert infonce_loss(b) >= 0

    def test_in_batch_b1_equivalence(self):
        rng = np.random.default_rng(5)
        b = _random_batch(rng, B=1)
        on = InfoNCEBatch(b.queries, b.positives, b.negatives, 1.0, True)
        assert infonce_loss(b) == infonce_loss(on)

    def test_argmax_invariant_in_temperature(self):
        rng = np.random.default_rng(6)
        b = _random_batch(rng, B=1, n=6)
        cands = np.concatenate([b.positives[:, None, :], b.negatives], axis=1)[0]
        for tau in (0.5, 1.0, 2.0):
            sims = cands @ b.queries[0] / tau
            assert np.argmax(sims) == np.argmax(cands @ b.queries[0])
        assert len({infonce_loss(InfoNCEBatch(b.queries, b.positives, b.negatives, t)) for t in (0.5, 1.0, 2.0)}) == 3

    @pytest.mark.parametrize("tau", [0.0, -1.0])
    def test_bad_temperature(self, tau):
        with pytest.raises(ValueError):
            infonce_loss(InfoNCEBatch(np.ones((1, 2)), np.ones((1, 2)), np.ones((1, 1, 2)), tau))

    def test_non_finite(self):
        with pytest.raises(ValueError):
            infonce_loss(InfoNCEBatch(np.array([[np.nan, 0]]), np.ones((1, 2)), np.ones((1, 1, 2))))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            infonce_loss(InfoNCEBatch(np.ones((2, 2)), np.ones((1, 2)), np.ones((2, 1, 2))))


def _finite_diff(batch, which, h=1e-4):
    base = {"queries": batch.queries, "positives": batch.positives, "negatives": batch.negatives}
    arr = base[which]
    grad = np.zeros_like(arr)
    for idx in np.ndindex(arr.shape):
        vals = []
        for sign in (1, -1):
            a = arr.copy()
            a[idx] += sign * h
            kw = dict(base, **{which: a})
            vals.append(infonce_loss(InfoNCEBatch(kw["queries"], kw["positives"], kw["negatives"], batch.temperature, batch.use_in_batch)))
        grad[idx] = (vals[0] - vals[1]) / (2 * h)
    return grad


def _rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-8)


class TestGradient:
    @pytest.mark.parametrize("in_batch", [False, True])
    def test_finite_differences(self, in_batch):
        rng = np.random.default_rng(7 + in_batch)
        for _ in range(5):
            b = _random_batch(rng, B=3, n=2, d=4, tau=float(rng.uniform(0.5, 2)), in_batch=in_batch)
            loss, g_q, g_p, g_n = infonce_grad(b)
            assert loss == pytest.approx(infonce_loss(b), abs=1e-15)
            for g, which in ((g_q, "queries"), (g_p, "positives"), (g_n, "negatives")):
                assert _rel_err(g, _finite_diff(b, which)) < 1e-4

    def test_symmetric_negative_gradients_equal(self):
        q = np.array([[1.0, 0.5]])
        n = np.tile([[0.2, 0.1]], (1, 7, 1))
        _, _, _, g_n = infonce_grad(InfoNCEBatch(q, np.array([[0.2, 0.1]]), n))
        assert np.all(g_n[0] == g_n[0, 0])


def _separable_setup():
    corpus = make_corpus([f"key{i} " + " ".join(f"f{(i * 7 + j) % 9}" for j in range(6)) for i in range(12)])
    queries = {f"q{i}": f"key{i} f{i % 9}" for i in range(12)}
    examples = []
    for i in range(12):
        negs = tuple(f"p{(i + j) % 12:03d}" for j in (1, 2, 3))
        examples.append(TrainingExample(f"q{i}", f"p{i:03d}", negs))
    return corpus, queries, examples


class TestToyEncoder:
    def test_untrained_equals_pseudo_embed(self):
        enc = ToyEncoder(dim=16, seed=2).build_vocab(["thanh tra ngân hàng"])
        np.testing.assert_allclose(enc.encode("thanh tra"), pseudo_embed("thanh tra", 16, 2), atol=1e-12)
        np.testing.assert_allclose(enc.encode("chưa thấy"), pseudo_embed("chưa thấy", 16, 2), atol=1e-12)

    def test_zero_learning_rate_constant_trace(self):
        corpus, queries, examples = _separable_setup()
        _, trace = train_toy(corpus, examples[:1], queries, ToyEncoder(dim=8), steps=20, batch_size=1, learning_rate=0.0)
        assert len(trace) == 20 and len(set(trace)) == 1
        # full batch: same examples each step, only the shuffled summation order differs
        _, trace = train_toy(corpus, examples, queries, ToyEncoder(dim=8), steps=20, batch_size=12, learning_rate=0.0)
        np.testing.assert_allclose(trace, trace[0], rtol=1e-14)

    def test_deterministic_and_decreasing(self):
        corpus, queries, examples = _separable_setup()
        runs = [train_toy(corpus, examples, queries, ToyEncoder(dim=8, seed=1), 60, 4, 0.5)[1] for _ in range(2)]
        assert runs[0] == runs[1]
        assert np.mean(runs[0][-10:]) < np.mean(runs[0][:10])

    def test_empty_examples(self):
        corpus, queries, _ = _separable_setup()
        with pytest.raises(DataError):
            train_toy(corpus, [], queries, ToyEncoder())

    def test_bad_steps(self):
        corpus, queries, examples = _separable_setup()
        with pytest.raises(ValueError):
            train_toy(corpus, examples, queries, ToyEncoder(), steps=0)

    def test_estimator_api(self):
        corpus, queries, examples = _separable_setup()
        enc = ToyEncoder(dim=8, steps=5, batch_size=4)
        assert clone(enc).get_params() == enc.get_params()
        enc.fit(examples, corpus=corpus, queries=queries)
        out = enc.transform(["key1 f1", "key2"])
        assert out.shape == (2, 8)
        np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0)

    def test_loss_trace_csv(self):
        buf = io.StringIO()
        write_loss_trace([2.0, 1.5], buf)
        assert buf.getvalue() == "step,loss\n1,2.0\n2,1.5\n"
