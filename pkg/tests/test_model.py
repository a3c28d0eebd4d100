import copy

import numpy as np
import pytest

from mdil.model import (DauUnit, DomainSpec, EncoderConfig, add_domain, build_model, count_parameters,
                        param_partition, sharing_ratio, snapshot)
from mdil.tensor import no_grad

from conftest import TINY_ENC


def _x(seed=1, n=2, size=8):
    return np.random.default_rng(seed).random((n, 3, size, size)).astype(np.float32)


def test_single_dau_hand_count():
    rng = np.random.default_rng(0)
    unit = DauUnit("u", 4, rng, np.float32)
    unit.add_domain(0, rng)
    unit.add_domain(1, rng)
    # shared: two 3x3 convs 4->4 = 288; per domain: two 1x1 adapters (32) + two BN (16) = 48
    part = param_partition(unit)
    assert count_parameters(p for p in unit.parameters() if p.name in part.shared) == 288
    assert count_parameters(p for p in unit.parameters() if p.domain == 0) == 48
    assert sharing_ratio(unit) == 0.75


def test_default_three_domain_ratio():
    rng = np.random.default_rng(0)
    classes = ("background", "rectangle", "disk", "triangle", "ring")
    m = build_model(EncoderConfig(), DomainSpec("A", classes + ("cross",)), rng)
    add_domain(m, DomainSpec("B", classes + ("stripe",)), rng=rng)
    add_domain(m, DomainSpec("C", classes + ("diamond",)), rng=rng)
    assert sharing_ratio(m) > 0.70


def test_partition_is_exact(two_domain_model):
    m = two_domain_model
    part = param_partition(m)
    params = m.named_parameters()
    names = set(part.shared).union(*part.domains.values())
    assert names == set(params)
    assert len(part.shared) + sum(len(s) for s in part.domains.values()) == len(params)
    total = count_parameters(params.values())
    split = count_parameters(params[n] for n in part.shared) + sum(
        count_parameters(params[n] for n in s) for s in part.domains.values())
    assert split == total


def test_parameter_names_follow_scheme(two_domain_model):
    names = set(two_domain_model.named_parameters())
    for expected in ("enc.stage0.down.w", "enc.stage0.down.dom0.bn.scale", "enc.stage1.unit0.w1",
                     "enc.stage1.unit0.dom1.aw2", "enc.stage1.unit0.dom1.bn2.shift",
                     "dec.dom0.up0.w", "dec.dom1.cls.w"):
        assert expected in names
    assert "enc.stage1.unit0.dom0.bn1.running_mean" in two_domain_model.buffers()


def test_plain_arch_has_no_domain_encoder_params():
    m = build_model(TINY_ENC, DomainSpec("A", ("bg", "x")), np.random.default_rng(0), arch="plain")
    add_domain(m, DomainSpec("B", ("bg", "y")), rng=np.random.default_rng(1))
    enc = [p for p in m.parameters() if p.name.startswith("enc.")]
    assert all(p.group == "shared" for p in enc)
    assert "enc.stage0.unit0.bn1.scale" in m.named_parameters()


def test_isolation_perturbing_other_domain(two_domain_model):
    m = two_domain_model
    x = _x()
    with no_grad():
        before = [m.forward(x, d).data.copy() for d in (0, 1)]
        for p in m.domain_parameters(1):
            p.data += np.float32(0.5)
        for bn in m.batchnorms():
            if ".dom1." in bn.prefix:
                bn.running_mean += 1.0
        assert np.array_equal(m.forward(x, 0).data, before[0])
        assert not np.array_equal(m.forward(x, 1).data, before[1])


def test_train_mode_forward_of_one_domain_leaves_other_stats(two_domain_model):
    m = two_domain_model
    buffers = {k: v.copy() for k, v in m.buffers().items()}
    with no_grad():
        m.forward(_x(), 1, "train")
    changed = {k for k, v in m.buffers().items() if not np.array_equal(v, buffers[k])}
    assert changed and all(".dom1." in k for k in changed)


def test_add_domain_keeps_old_outputs():
    rng = np.random.default_rng(0)
    m = build_model(TINY_ENC, DomainSpec("A", ("bg", "x", "y")), rng)
    x = _x()
    with no_grad():
        m.forward(x, 0, "train")  # move running stats off their defaults
        before = m.forward(x, 0).data.copy()
        for init in ("init_wt", "random"):
            add_domain(m, DomainSpec(f"B{init}", ("bg", "z")), init=init, rng=rng)
            assert np.array_equal(m.forward(x, 0).data, before)


def test_init_wt_copies_all_but_classifier():
    rng = np.random.default_rng(0)
    m = build_model(TINY_ENC, DomainSpec("A", ("bg", "x", "y")), rng)
    m.heads[0].ups[0][0].data += 1  # make the source distinguishable from a fresh draw
    add_domain(m, DomainSpec("B", ("bg", "z")), init="init_wt", rng=rng)
    params = m.named_parameters()
    for name, p in params.items():
        if ".dom1." in name or name.startswith("dec.dom1."):
            src = params[name.replace("dom1", "dom0")]
            if name.endswith("cls.w"):
                assert p.shape != src.shape or not np.array_equal(p.data, src.data)
            else:
                assert np.array_equal(p.data, src.data), name


def test_duplicate_domain_rejected(two_domain_model):
    with pytest.raises(ValueError):
        add_domain(two_domain_model, DomainSpec("A", ("bg", "x")), rng=np.random.default_rng(0))


def test_bad_spatial_size(two_domain_model):
    with pytest.raises(ValueError):
        two_domain_model.forward(np.zeros((1, 3, 6, 6), np.float32), 0)


def test_single_head_grows_union():
    rng = np.random.default_rng(0)
    m = build_model(TINY_ENC, DomainSpec("A", ("bg", "x", "y")), rng, single_head=True)
    add_domain(m, DomainSpec("B", ("bg", "y", "z")), rng=rng)
    assert m.union == ["bg", "x", "y", "z"]
    assert m.forward(_x(), "B").shape[1] == 4
    assert m.predict(_x(), "B").max() < 3
    np.testing.assert_array_equal(m.union_indices("B"), [0, 2, 3])


def test_snapshot_is_independent_and_frozen(two_domain_model):
    m = two_domain_model
    snap = snapshot(m)
    x = _x()
    ref = snap(x, 0).data.copy()
    for p in m.parameters():
        p.data += np.float32(1.0)
    assert np.array_equal(snap(x, 0).data, ref)
    assert all(p.frozen for p in snap.model.parameters())


def test_frozen_bn_runs_in_infer_mode(two_domain_model):
    m = two_domain_model
    m.freeze_domain(0)
    bufs = copy.deepcopy(m.buffers())
    with no_grad():
        m.forward(_x(), 0, "train")
    for k, v in m.buffers().items():
        if ".dom0." in k:
            assert np.array_equal(v, bufs[k])


def test_encoder_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(widths=(4, 8), up_kernels=(4,))
    with pytest.raises(ValueError):
        EncoderConfig(up_kernels=(3, 3, 3))
