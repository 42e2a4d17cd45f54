import io
from dataclasses import replace

import numpy as np
import pytest

from trustseg import diffcore as dc
from trustseg.crf import make_crf
from trustseg.data import SegSample, gen_scenes, with_scribbles
from trustseg.diffcore import Tensor
from trustseg.losses import UNLABELED, NoiseModel, bilinear_potts_grid, ce, mixed_robust_kl, pce
from trustseg.trainer import (
    HISTORY_COLUMNS,
    TrainConfig,
    TrainError,
    evaluate,
    micro_net_fn,
    net_input,
    new_state,
    predict,
    pretrain_pce,
    run_method,
    stage_a_pass,
    train_baseline,
    train_grid_tr,
    verify_chainrule_decomposition,
    write_history_csv,
)

K = 3
SMALL = TrainConfig(hidden=6, depth=1, batch_size=2, epochs=3, pretrain_epochs=3, m=2)


@pytest.fixture(scope="module")
def data():
    train = with_scribbles(gen_scenes(4, 16, 16, K, 0.05, seed=2), 1.0, seed=0)
    val = gen_scenes(2, 16, 16, K, 0.05, seed=3)
    return train, val


def objective(params, dataset, nu=0.0, cfg=SMALL):
    total = 0.0
    for s in dataset:
        q = dc.softmax(dc.forward(params, net_input(s.image)))
        v = pce(q, s.scribbles).item() / (s.scribbles != UNLABELED).sum()
        if nu:
            crf = make_crf(s.image, K, cfg.sigma_color, cfg.w_scale)
            v += nu * bilinear_potts_grid(q, crf).item() / crf.n_pixels
        total += v
    return total / len(dataset)


def test_zero_epochs_keep_initial_params(data):
    train, _ = data
    cfg = replace(SMALL, epochs=0, pretrain_epochs=0)
    init = new_state(cfg, K).params.flat()
    for method in ("pce-gd", "grid-gd", "grid-tr"):
        st = run_method(replace(cfg, method=method), train, K)
        assert np.array_equal(st.params.flat(), init)


def test_single_image_overfits_seeds():
    s = with_scribbles(gen_scenes(1, 16, 16, K, 0.05, seed=4), 1.0, seed=1)
    cfg = TrainConfig(hidden=8, depth=2, batch_size=1, pretrain_lr=0.05)
    st = pretrain_pce(new_state(cfg, K), s, 150, cfg)
    seeds = s[0].scribbles
    m = seeds != UNLABELED
    assert np.array_equal(predict(st.params, s[0].image)[m], seeds[m])


@pytest.mark.parametrize("method", ["pce-gd", "grid-gd", "grid-tr"])
def test_training_is_deterministic(data, method):
    train, val = data
    cfg = replace(SMALL, method=method)
    a = run_method(cfg, train, K, val)
    b = run_method(cfg, train, K, val)
    assert np.array_equal(a.params.flat(), b.params.flat())
    fa, fb = io.StringIO(), io.StringIO()
    write_history_csv(fa, a.history)
    write_history_csv(fb, b.history)
    assert fa.getvalue() == fb.getvalue()


def test_grid_gd_without_potts_is_pce_gd(data):
    train, val = data
    a = run_method(replace(SMALL, method="pce-gd"), train, K, val)
    b = run_method(replace(SMALL, method="grid-gd", nu=0.0), train, K, val)
    assert a.params.flat().tobytes() == b.params.flat().tobytes()
    fa, fb = io.StringIO(), io.StringIO()
    write_history_csv(fa, a.history)
    write_history_csv(fb, b.history)
    assert fa.getvalue() == fb.getvalue()


def test_grid_gd_first_epoch_lowers_objective(data):
    train, _ = data
    cfg = replace(SMALL, method="grid-gd", epochs=1, lr=0.005)
    st = new_state(cfg, K)
    before = objective(st.params, train, cfg.nu)
    train_baseline(st, train, cfg)
    assert objective(st.params, train, cfg.nu) < before


def test_pretraining_lowers_pce(data):
    train, _ = data
    st = new_state(SMALL, K)
    before = objective(st.params, train)
    pretrain_pce(st, train, 5, replace(SMALL, pretrain_lr=0.01))
    assert objective(st.params, train) < before
    assert st.epoch == 0


def test_lambda_zero_labelings_fixed_across_stage_a(data):
    train, _ = data
    cfg = replace(SMALL, method="grid-tr", lam=0.0, m=1, epochs=1)
    st = new_state(cfg, K)
    pretrain_pce(st, train, 2, cfg)
    train_grid_tr(st, train, cfg)
    first = {i: v.copy() for i, v in st.labelings.items()}
    cfg2 = replace(cfg, epochs=2)
    st.opt = None
    train_grid_tr(st, train, cfg2)
    assert st.epoch == 3 and len(st.stage_a_log) == 3 * len(train)
    assert all(np.array_equal(first[i], st.labelings[i]) for i in first)


def test_huge_lambda_labels_follow_network(data):
    train, _ = data
    cfg = replace(SMALL, method="grid-tr", lam=1e6, epsilon=0.0, w_scale=0.0)
    st = new_state(cfg, K)
    pretrain_pce(st, train, 3, cfg)
    crfs = [make_crf(s.image, K, cfg.sigma_color, cfg.w_scale) for s in train]
    stage_a_pass(st, train, crfs, cfg)
    for i, s in enumerate(train):
        seeds = s.scribbles
        present = np.unique(seeds[seeds != UNLABELED])
        logits = dc.forward(st.params, net_input(s.image)).data
        masked = np.full_like(logits, -np.inf)
        masked[..., present] = logits[..., present]
        expect = np.where(seeds != UNLABELED, seeds, np.argmax(masked, axis=-1))
        assert np.array_equal(st.labelings[i], expect)
        # with eps = 0 the Stage B loss is plain CE against that labeling
        q = dc.softmax(dc.forward(st.params, net_input(s.image)))
        got = mixed_robust_kl(q, st.labelings[i], seeds, NoiseModel(0.0, K)).item()
        assert got == pytest.approx(ce(q, st.labelings[i]).item(), rel=1e-13)


def test_stage_a_energy_never_increases(data):
    train, _ = data
    cfg = replace(SMALL, method="grid-tr", epochs=4, m=1)
    st = run_method(cfg, train, K)
    later = [r for r in st.stage_a_log if np.isfinite(r["prev_energy"])]
    assert later and all(r["energy"] <= r["prev_energy"] + 1e-9 * max(1, abs(r["prev_energy"])) for r in later)


def test_history_rows(data):
    train, val = data
    st = run_method(replace(SMALL, method="grid-tr"), train, K, val)
    assert [r["epoch"] for r in st.history] == [1, 2, 3]
    buf = io.StringIO()
    write_history_csv(buf, st.history)
    lines = buf.getvalue().splitlines()
    assert lines[0] == ",".join(HISTORY_COLUMNS) and len(lines) == 4


def test_evaluate_reports_bands(data):
    train, val = data
    st = new_state(SMALL, K)
    res = evaluate(st.params, val, K, widths=(1, 2))
    assert 0 <= res["miou"] <= 1 and [w for w, _ in res["trimap"]] == [1, 2]


def test_config_validation_and_round_trip():
    with pytest.raises(TrainError):
        TrainConfig(method="other").validate()
    with pytest.raises(TrainError):
        TrainConfig(epsilon=0.7).validate(3)
    with pytest.raises(TrainError):
        TrainConfig(m=0).validate()
    with pytest.raises(TrainError):
        TrainConfig(lam=-1).validate()
    cfg = replace(SMALL, lam=2.5, method="grid-gd")
    assert TrainConfig.from_dict({k: str(v) for k, v in cfg.to_dict().items()}) == cfg
    with pytest.raises(TrainError):
        TrainConfig.from_dict({"nope": 1})


def test_training_needs_seeds():
    s = gen_scenes(1, 16, 16, K, seed=0)
    with pytest.raises(TrainError):
        run_method(SMALL, s, K)
    with pytest.raises(TrainError):
        run_method(SMALL, [SegSample(s[0].image, s[0].gt, np.full((16, 16), UNLABELED))], K)


def test_chain_rule_linear_model():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(5, 4))
    f = lambda th: dc.reshape(dc.matmul(Tensor(a), dc.reshape(th, (4, 1))), (-1,))  # noqa: E731
    loss = lambda s: dc.tsum(dc.square(s))  # noqa: E731
    rep = verify_chainrule_decomposition(f, rng.normal(size=4), loss, 0.1)
    assert rep.ok(1e-12)


def test_chain_rule_micro_net():
    rng = np.random.default_rng(1)
    template = dc.init_params(3, 2, hidden=2, depth=1, seed=0)
    img = rng.uniform(size=(3, 3, 3))
    y = rng.integers(0, 2, size=(3, 3))
    loss = lambda s: ce(dc.reshape(s, (3, 3, 2)), y)  # noqa: E731
    rep = verify_chainrule_decomposition(micro_net_fn(template, img), template.flat(), loss, 0.05)
    assert rep.n_params == template.num_params() and rep.ok(1e-10)


def test_chain_rule_zero_step():
    template = dc.init_params(3, 2, hidden=2, depth=1, seed=0)
    img = np.random.default_rng(2).uniform(size=(3, 3, 3))
    loss = lambda s: dc.tsum(dc.square(s))  # noqa: E731
    rep = verify_chainrule_decomposition(micro_net_fn(template, img), template.flat(), loss, 0.0)
    assert rep.delta_theta_norm == 0.0 and rep.ok(1e-15)
