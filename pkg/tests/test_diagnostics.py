import math

import numpy as np
import pytest

from fedlab.data import partition_dirichlet, partition_iid_balanced, synth_blobs
from fedlab.diagnostics import (
    RoundMetrics, SimilarityRecord, evaluate_global, loss_dispersion, loss_traces, overfit_round,
    pairwise_cosine,
)
from fedlab.errors import ContractError
from fedlab.model import ModelSpec, accuracy, init_params, loss
from fedlab.optim import ClientUpdate, FedConfig, fedavg_round, fedavg_run
from fedlab.model import ParamVector

LAYOUT = (("a", 0, 2), ("b", 2, 3))


def upd(cid, values, kind="delta"):
    return ClientUpdate(cid, ParamVector(np.asarray(values, float), LAYOUT), 1, 0.0, kind)


def brute_cos(u, v):
    dot = sum(x * y for x, y in zip(u, v))
    return dot / (math.sqrt(sum(x * x for x in u)) * math.sqrt(sum(y * y for y in v)))


def test_pairwise_cosine_matches_brute_force():
    rng = np.random.default_rng(0)
    vals = [rng.standard_normal(5) for _ in range(4)]
    recs = pairwise_cosine([upd(i, v) for i, v in enumerate(vals)], LAYOUT, round_index=7)
    for rec, (name, start, length) in zip(recs, LAYOUT):
        pairs = [brute_cos(vals[i][start:start + length], vals[j][start:start + length])
                 for i in range(4) for j in range(i + 1, 4)]
        assert rec.layer == name and rec.round == 7
        assert rec.pair_count == 6 and rec.excluded_pairs == 0
        assert rec.mean_cos == pytest.approx(sum(pairs) / 6, rel=1e-12)


def test_identical_and_opposite_updates():
    recs = pairwise_cosine([upd(0, [1, 2, 3, 4, 5]), upd(1, [2, 4, 6, 8, 10])], LAYOUT)
    assert [r.mean_cos for r in recs] == pytest.approx([1.0, 1.0])
    recs = pairwise_cosine([upd(0, [1, 2, 3, 4, 5]), upd(1, [-1, -2, -3, -4, -5])], LAYOUT)
    assert [r.mean_cos for r in recs] == pytest.approx([-1.0, -1.0])


def test_zero_norm_pairs_are_excluded():
    recs = pairwise_cosine(
        [upd(0, [0, 0, 1, 0, 0]), upd(1, [1, 0, 1, 0, 0]), upd(2, [2, 0, 0, 1, 0])], LAYOUT
    )
    a, b = recs
    assert a.excluded_pairs == 2 and a.pair_count == 3 and a.mean_cos == pytest.approx(1.0)
    assert b.excluded_pairs == 0
    recs = pairwise_cosine([upd(0, [0, 0, 1, 0, 0]), upd(1, [0, 0, 1, 0, 0])], LAYOUT)
    assert math.isnan(recs[0].mean_cos) and recs[0].excluded_pairs == 1


def test_pairwise_cosine_contract():
    with pytest.raises(ContractError):
        pairwise_cosine([upd(0, [1, 2, 3, 4, 5])], LAYOUT)
    with pytest.raises(ContractError):
        pairwise_cosine([upd(0, [1] * 5, "params"), upd(1, [2] * 5, "params")], LAYOUT)


def test_mean_cosine_skips_nan_layers():
    m = RoundMetrics(1, 0.5, 1.0, 1.0, {0: 1.0}, (0,), [
        SimilarityRecord(1, "a", float("nan"), 1, 1), SimilarityRecord(1, "b", 0.25, 1, 0),
    ])
    assert m.mean_cosine() == 0.25
    assert m.cosine_by_layer["b"] == 0.25


def test_evaluate_global_independent_of_eval_batch():
    ds = synth_blobs(157, 4, 3, 0.5, 2)
    spec = ModelSpec("mlp", (3,), 4, (5,))
    p = init_params(spec, 1)
    runs = [evaluate_global(spec, p, ds, b) for b in (1, 10, 1000)]
    assert runs[0] == runs[1] == runs[2]
    full = ds.batch(np.arange(len(ds)))
    assert runs[0][0] == accuracy(spec, p, full)
    assert runs[0][1] == pytest.approx(loss(spec, p, full), rel=1e-13)


def test_overfit_round_is_one_indexed_earliest_minimum():
    assert overfit_round([3.0, 2.0, 1.0, 1.5]) == 3
    assert overfit_round([2.0, 1.0, 1.0]) == 2
    with pytest.raises(ContractError):
        overfit_round([])


def _metrics(r, losses):
    return RoundMetrics(r, 0.0, 0.0, float(np.mean(list(losses.values()))), losses, tuple(losses))


def test_loss_traces_and_dispersion():
    hist = [_metrics(1, {0: 1.0, 2: 3.0}), _metrics(2, {1: 2.0, 2: 2.0})]
    assert loss_traces(hist) == {0: [1.0, None], 1: [None, 2.0], 2: [3.0, 2.0]}
    assert loss_traces(hist, [2]) == {2: [3.0, 2.0]}
    assert loss_dispersion(hist) == [1.0, 0.0]


def test_round_cosines_use_participants_and_agree_across_options():
    ds = synth_blobs(80, 4, 3, 0.5, 1)
    spec = ModelSpec("mlp", (3,), 4, (5,))
    theta = init_params(spec, 0)
    shards = partition_dirichlet(ds, 5, 0.5, 0)
    from fedlab.diagnostics import round_metrics

    out = {}
    for option in ("delta", "params"):
        cfg = FedConfig(eta_l=0.1, B=4, E=1, K=5, R=1, C_frac=0.6, update_option=option, seed=2)
        res = fedavg_round(spec, ds, shards, theta, cfg, 0)
        out[option] = round_metrics(spec, res, ds)
    a, b = out["delta"], out["params"]
    assert len(a.participants) == 3
    assert all(r.pair_count == 3 for r in a.similarity)
    assert [r.layer for r in a.similarity] == ["fc1", "fc2"]
    for x, y in zip(a.similarity, b.similarity):
        assert x.mean_cos == pytest.approx(y.mean_cos, abs=1e-9)


def test_iid_updates_align_better_than_skewed_ones():
    ds = synth_blobs(400, 4, 6, 0.5, 3)
    spec = ModelSpec("mlp", (6,), 4, (8,))
    cos = {}
    for name, shards in (("iid", partition_iid_balanced(ds, 4, 0)), ("skew", partition_dirichlet(ds, 4, 0.05, 0))):
        cfg = FedConfig(eta_l=0.1, B=20, E=1, K=4, R=3)
        run = fedavg_run(spec, ds, ds, shards, cfg)
        cos[name] = np.mean([m.mean_cosine() for m in run.metrics])
    assert cos["iid"] > cos["skew"]
