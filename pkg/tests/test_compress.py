import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from carm import compress as C
from carm.models import best_cnn, best_forest, best_lstm, build_network, load_any, save_model, train
from carm.models.training import TrainedModel

from test_models import small_cnn, toy_split


def model_with(tensors_by_name, config=None, seed=0):
    """Network of ``config`` with its prunable tensors overwritten."""
    config = config or small_cnn()
    net = build_network(config, 16, seed=seed)
    t = net.tensors()
    for k, v in tensors_by_name.items():
        t[k][...] = v
    net.invalidate()
    return TrainedModel(config, 16, network=net)


@pytest.fixture(scope="module")
def trained():
    split = toy_split()
    return train(small_cnn(), split, epochs=4, seed=0), split


# -- pruning ---------------------------------------------------------------------------

def test_prune_worked_example():
    m = model_with({})
    names = m.network.prunable_tensors()
    t = m.network.tensors()
    for n in names:
        t[n][...] = 1.0
    first = t[names[0]].reshape(-1)
    first[:4] = [0.5, -0.1, 0.3, 0.05]
    first[4:] = 10.0
    for n in names[1:]:
        t[n][...] = 10.0
    total = sum(t[n].size for n in names)
    ratio = 2.5 / total  # floor(ratio * total) == 2
    p = C.prune_global(m, ratio)
    np.testing.assert_array_equal(p.network.tensors()[names[0]].reshape(-1)[:4], [0.5, 0, 0.3, 0])


def test_prune_count_on_1000_weights():
    assert C.PruneSpec(0.7).count(1000) == 700
    assert C.PruneSpec(0.3).count(10) == 3  # 0.3 * 10 is 2.9999... in binary
    assert C.PruneSpec(0.0).count(1000) == 0


@pytest.mark.parametrize("ratio", C.PRUNE_LEVELS)
def test_prune_exact_count_and_smallest_magnitudes(trained, ratio):
    model, _ = trained
    p = C.prune_global(model, ratio)
    before = np.concatenate([w.ravel() for w in C.prunable_weights(model).values()])
    after = np.concatenate([w.ravel() for w in C.prunable_weights(p).values()])
    k = C.PruneSpec(ratio).count(before.size)
    assert int(np.sum(after == 0)) == k
    kept = np.abs(before[after != 0])
    dropped = np.abs(before[after == 0])
    if k and kept.size:
        assert dropped.max() <= kept.min()
    np.testing.assert_array_equal(after[after != 0], before[after != 0])
    # non-prunable tensors untouched
    for name in set(model.tensors()) - set(model.network.prunable_tensors()):
        np.testing.assert_array_equal(p.tensors()[name], model.tensors()[name])


def test_prune_does_not_mutate_input(trained):
    model, _ = trained
    snap = {k: v.copy() for k, v in model.tensors().items()}
    C.prune_global(model, 0.7)
    for k, v in model.tensors().items():
        np.testing.assert_array_equal(v, snap[k])


def test_prune_idempotent_and_monotone(trained):
    model, _ = trained
    p = C.prune_global(model, 0.5)
    again = C.prune_global(p, 0.5)
    for k in p.tensors():
        np.testing.assert_array_equal(again.tensors()[k], p.tensors()[k])
    levels = [C.sparsity_of(C.prune_global(model, r)) for r in C.PRUNE_LEVELS]
    assert levels == sorted(levels)
    z5 = {k: v == 0 for k, v in C.prunable_weights(C.prune_global(model, 0.5)).items()}
    z7 = {k: v == 0 for k, v in C.prunable_weights(C.prune_global(model, 0.7)).items()}
    assert all(np.all(z7[k] | ~z5[k]) for k in z5)


def test_prune_rejects_bad_ratio_and_forest(trained):
    model, split = trained
    for r in (-0.1, 1.0, 1.5):
        with pytest.raises(ValueError):
            C.prune_global(model, r)
    forest = train(best_forest(), split, seed=0)
    with pytest.raises(ValueError):
        C.prune_global(forest, 0.5)


def test_sparsity_survives_save_load(trained, tmp_path):
    model, _ = trained
    p = C.prune_global(model, 0.7)
    save_model(p, tmp_path / "p.carm")
    q = load_any(tmp_path / "p.carm")
    assert C.sparsity_of(q) == C.sparsity_of(p)
    x = toy_split().test.data[:5]
    np.testing.assert_allclose(q.predict_proba(x), p.predict_proba(x), atol=1e-6)


def test_sparse_path_matches_dense(trained):
    model, split = trained
    p = C.prune_global(model, 0.9)
    x = split.test.data
    sparse = p.predict_proba(x)
    p.network.set_sparse(False)
    np.testing.assert_allclose(p.predict_proba(x), sparse, atol=1e-10)


def test_finetune_keeps_zero_pattern(trained):
    model, split = trained
    p = C.prune_global(model, 0.7)
    f = C.finetune_pruned(p, split, epochs=2, seed=0)
    for k, w in C.prunable_weights(p).items():
        np.testing.assert_array_equal(C.prunable_weights(f)[k] == 0, w == 0)
    assert C.sparsity_of(f) == C.sparsity_of(p)
    assert f.meta["finetune_epochs"] == 2


# -- quantisation ----------------------------------------------------------------------

finite = st.floats(-50, 50, allow_nan=False, allow_subnormal=False)


@given(arrays(np.float64, st.integers(1, 200), elements=finite))
def test_quantize_error_bounded_by_half_scale(w):
    q = C.quantize_tensor(w)
    assert q.q.dtype == np.uint8
    err = np.abs(q.dequantize() - w)
    assert err.max() <= q.scale / 2 * (1 + 1e-6) + 1e-12
    # zero is exactly representable
    assert (np.float64(0) - 0) == (q.zero_point - q.zero_point) * q.scale
    zeros = w == 0
    if zeros.any():
        assert np.all(q.dequantize()[zeros] == 0)


def test_quantize_all_zero_and_constant_tensors():
    q = C.quantize_tensor(np.zeros(10))
    assert q.scale == 1.0 and q.zero_point == 0
    np.testing.assert_array_equal(q.dequantize(), 0)
    q = C.quantize_tensor(np.full(5, 3.0))
    np.testing.assert_allclose(q.dequantize(), 3.0, atol=q.scale / 2)


def test_quantize_deterministic(trained):
    model, _ = trained
    a, b = C.quantize_int8(model), C.quantize_int8(model)
    for k in a.quantized:
        np.testing.assert_array_equal(a.quantized[k].q, b.quantized[k].q)


def test_quantized_forward_matches_dequantized(trained):
    model, split = trained
    qm = C.quantize_int8(model)
    x = split.test.data
    np.testing.assert_allclose(C.quantized_forward(qm, x), C.dequantize(qm).predict_proba(x),
                               atol=1e-6)
    agree = np.mean(C.quantized_forward(qm, x).argmax(1) == model.predict_proba(x).argmax(1))
    assert agree >= 0.95
    with pytest.raises(ValueError):
        C.quantized_forward(qm, x[:, :, :50])


def test_quantized_preserves_pruned_zeros(trained):
    model, _ = trained
    p = C.prune_global(model, 0.7)
    qm = C.quantize_int8(p)
    assert C.sparsity_of(qm) == pytest.approx(C.sparsity_of(p))


@pytest.mark.parametrize("config", [small_cnn(), best_lstm()])
def test_int8_artifact_size_and_round_trip(config, tmp_path):
    m = model_with({}, config)
    float_bytes = save_model(m, tmp_path / "f.carm")
    qm = C.quantize_int8(m)
    q_bytes = C.save_quantized(qm, tmp_path / "q.carm")
    assert q_bytes <= 0.30 * float_bytes
    back = load_any(tmp_path / "q.carm")
    assert isinstance(back, C.QuantizedModel)
    for k in qm.quantized:
        np.testing.assert_array_equal(back.quantized[k].q, qm.quantized[k].q)
        assert back.quantized[k].scale == qm.quantized[k].scale


# -- latency ---------------------------------------------------------------------------

def test_latency_report_stats():
    r = C.latency_report([0.1, 0.2, 0.3, 0.4])
    assert r.median == pytest.approx(0.25) and r.n == 4
    assert r.p95 == pytest.approx(np.percentile([0.1, 0.2, 0.3, 0.4], 95))
    assert np.isnan(C.latency_report([]).median)


def test_benchmark_latency_sanity(trained):
    model, split = trained
    r = C.benchmark_latency(model, split.test.data, repeats=10, warmup=1)
    assert r.n == 10 and 0 < r.median <= r.p95 < 1.0
    with pytest.raises(ValueError):
        C.benchmark_latency(model, split.test.data[:0])
    with pytest.raises(ValueError):
        C.benchmark_latency(model, split.test.data, repeats=0)


def test_fresh_model_sparsity_near_zero():
    assert C.sparsity_of(model_with({})) < 1e-3


def test_quantized_argmax_equals_dequantized_accuracy(trained):
    from carm.models import evaluate
    model, split = trained
    qm = C.quantize_int8(model)
    x = split.test
    assert evaluate(qm, x) == evaluate(C.dequantize(qm), x)
    p = C.quantized_forward(qm, x.data)
    np.testing.assert_allclose(p.sum(1), 1.0, atol=1e-12)
    assert np.all(p >= 0)


def interleaved_medians(a, b, x, rounds=5, repeats=60):
    ma, mb = [], []
    for _ in range(rounds):
        ma.append(C.benchmark_latency(a, x, repeats=repeats).median)
        mb.append(C.benchmark_latency(b, x, repeats=repeats).median)
    return float(np.median(ma)), float(np.median(mb))


def test_pruned_latency_not_slower(trained):
    # The best-CNN tensors are below the sparse-dispatch size, so both run dense and
    # the directional check holds only up to timing noise.
    model, split = trained
    dense, pruned = interleaved_medians(model, C.prune_global(model, 0.7), split.test.data)
    assert pruned <= 1.25 * dense


def test_sparse_path_pays_on_large_layer():
    import time
    from carm.models import layers as L
    rng = np.random.default_rng(0)
    layer = L.Dense(1024, 1024, rng)
    w = layer.params["W"]
    w[np.abs(w) < np.quantile(np.abs(w), 0.9)] = 0.0
    x = rng.normal(size=(1, 1024))
    dense_y = layer.forward(x)
    layer.use_sparse(True)
    np.testing.assert_allclose(layer.forward(x), dense_y, atol=1e-12)

    def timed(on):
        layer.use_sparse(on)
        t0 = time.perf_counter()
        for _ in range(200):
            layer.forward(x)
        return time.perf_counter() - t0

    assert min(timed(True) for _ in range(3)) < min(timed(False) for _ in range(3))


def test_single_repeat_median_within_3x(trained):
    model, split = trained
    many = C.benchmark_latency(model, split.test.data, repeats=100).median
    one = min(C.benchmark_latency(model, split.test.data, repeats=1).median for _ in range(3))
    assert many / 3 <= one <= 3 * many
