import copy
from dataclasses import replace

import numpy as np
import pytest

from mdil.optim import SGD, ParamGroup
from mdil.tensor import Parameter, backward
from mdil.trainer import (FREEZE_SHARED, TrainConfig, begin_step, compute_losses, make_optimizer,
                          new_model, run_sequence, train_step)


def _params(model):
    return {n: p.data.copy() for n, p in model.named_parameters().items()}


def _after_first_step(specs, train, enc, cfg):
    model = new_model(enc, cfg)
    train_step(model, specs[0], train[specs[0].name], cfg)
    return model


def test_kld_is_zero_right_after_begin_step(tiny_domains, tiny_enc, tiny_cfg):
    specs, train, _ = tiny_domains
    model = _after_first_step(specs, train, tiny_enc, tiny_cfg)
    snap = begin_step(model, specs[1], tiny_cfg)
    for idx in ([0, 1], [2, 3, 4, 5], [7]):
        bundle = compute_losses(model, snap, train["B"].batch(idx), 1, tiny_cfg)
        assert abs(bundle.l_kld.item()) <= 1e-6
        assert bundle.l_ce.item() > 0


def test_kld_gradient_misses_new_domain_weights(tiny_domains, tiny_enc, tiny_cfg):
    specs, train, _ = tiny_domains
    model = _after_first_step(specs, train, tiny_enc, tiny_cfg)
    snap = begin_step(model, specs[1], tiny_cfg)
    for p in model.shared_parameters():
        p.data += np.float32(0.01)  # move away from the teacher so the KL term is non-trivial
    bundle = compute_losses(model, snap, train["B"].batch([0, 1]), 1, tiny_cfg)
    assert bundle.l_kld.item() > 0
    backward(bundle.l_kld)
    for p in model.domain_parameters(1):
        assert p.grad is None or not p.grad.any()
    assert any(p.grad is not None and p.grad.any() for p in model.shared_parameters())


def test_frozen_old_domain_untouched_by_step(tiny_domains, tiny_enc, tiny_cfg):
    specs, train, val = tiny_domains
    reports, model = run_sequence(specs[:1], train, val, tiny_cfg, enc=tiny_enc)
    old = {n: v for n, v in _params(model).items() if ".dom0." in n or n.startswith("dec.dom0.")}
    bufs = {k: v.copy() for k, v in model.buffers().items() if ".dom0." in k}
    shared = {p.name: p.data.copy() for p in model.shared_parameters()}
    run_sequence(specs[1:2], train, val, tiny_cfg, enc=tiny_enc, model=model)
    now = _params(model)
    assert all(np.array_equal(now[n], v) for n, v in old.items())
    assert all(np.array_equal(model.buffers()[k], v) for k, v in bufs.items())
    assert any(not np.array_equal(now[n], v) for n, v in shared.items())


def test_freeze_shared_keeps_shared_weights(tiny_domains, tiny_enc, tiny_cfg):
    specs, train, val = tiny_domains
    _, model = run_sequence(specs[:1], train, val, tiny_cfg, enc=tiny_enc)
    shared = {p.name: p.data.copy() for p in model.shared_parameters()}
    new = replace(tiny_cfg, dlr=FREEZE_SHARED)
    run_sequence(specs[1:2], train, val, new, enc=tiny_enc, model=model)
    assert all(np.array_equal(p.data, shared[p.name]) for p in model.shared_parameters())
    assert any(p.grad is None for p in model.domain_parameters(1))


def test_optimizer_groups_use_dlr(tiny_domains, tiny_enc):
    specs, train, _ = tiny_domains
    cfg = TrainConfig(lr=0.2, dlr=100, momentum=0.0, epochs=1)
    model = _after_first_step(specs, train, tiny_enc, cfg)
    first = make_optimizer(model, cfg, first_step=True)
    assert [g.lr for g in first.groups] == [0.2, 0.2]
    begin_step(model, specs[1], cfg)
    opt = make_optimizer(model, cfg)
    lrs = {g.name: g.lr for g in opt.groups}
    assert lrs == {"specific": 0.2, "shared": 0.2 / 100}
    specific = {id(p) for p in opt.groups[0].params}
    assert specific == {id(p) for p in model.domain_parameters(1)}


def test_sgd_update_by_hand():
    a = Parameter("a", np.array([1.0, 2.0]))
    b = Parameter("b", np.array([1.0]), "domain", 0)
    opt = SGD([ParamGroup([a], 0.01), ParamGroup([b], 1.0)], momentum=0.5)
    for _ in range(2):
        a.grad = np.array([1.0, -1.0])
        b.grad = np.array([2.0])
        opt.step()
    # velocities: 1, then 1.5
    np.testing.assert_allclose(a.data, [1.0 - 0.025, 2.0 + 0.025])
    np.testing.assert_allclose(b.data, [1.0 - 5.0])
    assert a.grad is None


def test_sgd_rejects_frozen_parameters():
    p = Parameter("p", np.zeros(1))
    p.freeze()
    with pytest.raises(ValueError):
        SGD([ParamGroup([p], 0.1)])


def test_loss_decreases_on_toy_set(tiny_enc):
    from mdil.data import default_domain_specs
    from mdil.experiment import generate_all, model_spec
    gen = default_domain_specs(n_train=32, n_val=4, image_size=16)[:1]
    train, val = generate_all(gen)
    cfg = TrainConfig(lr=0.05, epochs=5, batch_size=4, seed=1)
    reports, _ = run_sequence([model_spec(gen[0])], train, val, cfg, enc=tiny_enc)
    losses = [e["l_ce"] for e in reports[0].epoch_losses]
    assert len(losses) == 5
    assert all(b < a for a, b in zip(losses, losses[1:])), losses


def test_group_update_ratio_is_one_over_dlr(tiny_domains, tiny_enc):
    specs, train, _ = tiny_domains
    cfg = TrainConfig(lr=0.25, dlr=100, momentum=0.0, epochs=1)
    model = _after_first_step(specs, train, tiny_enc, cfg)
    begin_step(model, specs[1], cfg)
    opt = make_optimizer(model, cfg)
    for g in opt.groups:
        for p in g.params:
            p.data = p.data.astype(np.float64)
            p.grad = np.ones_like(p.data)
    before = {p.name: p.data.copy() for g in opt.groups for p in g.params}
    opt.step()
    d_t = np.concatenate([(before[p.name] - p.data).ravel() for p in opt.groups[0].params])
    d_s = np.concatenate([(before[p.name] - p.data).ravel() for p in opt.groups[1].params])
    np.testing.assert_allclose(d_t, 0.25, rtol=1e-12)
    np.testing.assert_allclose(d_s / d_t.mean(), 1 / 100, rtol=1e-10)


def test_sgd_trivial_identities():
    p = Parameter("p", np.array([0.5, -1.0]))
    q = Parameter("q", np.array([2.0]))
    opt = SGD([ParamGroup([p], 0.0), ParamGroup([q], 0.1)], momentum=0.0)
    p.grad, q.grad = np.array([3.0, 3.0]), np.array([4.0])
    opt.step()
    assert np.array_equal(p.data, [0.5, -1.0])
    assert q.data[0] == 2.0 - 0.1 * 4.0


def test_run_sequence_reports_every_step(tiny_domains, tiny_enc, tiny_cfg):
    specs, train, val = tiny_domains
    seen = []
    loaders = {k: (lambda v=v: v) for k, v in train.items()}
    reports, model = run_sequence(specs, loaders, val, tiny_cfg, enc=tiny_enc,
                                  on_step=lambda s, m, r: seen.append((s, r.domain, len(m.domains))))
    assert seen == [(1, "A", 1), (2, "B", 2), (3, "C", 3)]
    assert list(reports[-1].miou) == ["A", "B", "C"]
    assert all(0 <= v <= 100 for v in reports[-1].miou.values())


def test_run_sequence_is_deterministic(tiny_domains, tiny_enc, tiny_cfg):
    specs, train, val = tiny_domains
    _, a = run_sequence(specs[:2], train, val, tiny_cfg, enc=tiny_enc)
    _, b = run_sequence(specs[:2], train, val, tiny_cfg, enc=tiny_enc)
    pa, pb = _params(a), _params(b)
    assert all(np.array_equal(pa[k], pb[k]) for k in pa)


def test_sequence_validation(tiny_domains, tiny_enc, tiny_cfg):
    specs, train, val = tiny_domains
    with pytest.raises(ValueError):
        run_sequence([], train, val, tiny_cfg, enc=tiny_enc)
    with pytest.raises(ValueError):
        run_sequence([specs[0], specs[0]], train, val, tiny_cfg, enc=tiny_enc)


@pytest.mark.parametrize("kw", [dict(lr=0), dict(dlr=0.5), dict(dlr="x"), dict(lambda_kld=-1),
                                dict(epochs=0), dict(momentum=1.0), dict(init="zeros"), dict(distill="some")])
def test_train_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_distill_last_uses_only_previous_domain(tiny_domains, tiny_enc, tiny_cfg):
    specs, train, val = tiny_domains
    _, model = run_sequence(specs[:2], train, val, tiny_cfg, enc=tiny_enc)
    snap = begin_step(model, specs[2], tiny_cfg)
    for p in model.shared_parameters():
        p.data += np.float32(0.01)
    batch = train["C"].batch([0, 1])
    both = compute_losses(model, snap, batch, 2, tiny_cfg).l_kld.item()
    last = compute_losses(model, snap, batch, 2, replace(tiny_cfg, distill="last")).l_kld.item()
    assert 0 < last < both


def test_kld_gradient_through_whole_model_matches_finite_differences(tiny_enc):
    # float64 model, old domain frozen (BN in inference mode), shared weights moved off the teacher
    from mdil.model import DomainSpec, add_domain, build_model, snapshot
    from mdil.ops import kl_div
    from mdil.tensor import no_grad
    rng = np.random.default_rng(0)
    m = build_model(tiny_enc, DomainSpec("A", ("bg", "x", "y")), rng, dtype=np.float64)
    x = rng.random((2, 3, 8, 8))
    with no_grad():
        m.forward(x, 0, "train")
    snap = snapshot(m)
    add_domain(m, DomainSpec("B", ("bg", "z")), rng=rng)
    m.freeze_domain(0)
    for p in m.shared_parameters():
        p.data += rng.standard_normal(p.shape) * 0.05

    def loss():
        return kl_div(m.forward(x, 0, "infer"), snap.forward(x, 0))

    backward(loss())
    for p in m.shared_parameters():
        for _ in range(2):
            idx = tuple(int(rng.integers(0, s)) for s in p.shape)
            old = p.data[idx]
            p.data[idx] = old + 1e-6
            up = loss().item()
            p.data[idx] = old - 1e-6
            down = loss().item()
            p.data[idx] = old
            num = (up - down) / 2e-6
            assert abs(num - p.grad[idx]) <= 1e-3 * max(abs(num), abs(p.grad[idx]), 1e-9), p.name
