import csv

import numpy as np
import pytest

import pillarnext.conv as conv_mod
from pillarnext.errors import NonDifferentiablePoint
from pillarnext.functional import add, relu
from pillarnext.gradcheck import (GradCase, grad_check, registered_cases, rel_error, run_suite,
                                  write_report)
from pillarnext.tape import Tape


def _case(name):
    return next(c for c in registered_cases() if c.name == name)


def test_rel_error_definition():
    assert rel_error(np.array([1.0, 0.0]), np.array([1.0, 0.0])) == 0.0
    assert rel_error(np.array([2.0]), np.array([1.0])) == pytest.approx(0.5)
    assert rel_error(np.zeros(3), np.full(3, 1e-12)) == pytest.approx(np.sqrt(3) * 1e-12 / 1e-8)


def test_linear_is_essentially_exact():
    r = grad_check(_case("linear"))
    assert r.max_error < 1e-10


@pytest.mark.parametrize("name", ["conv_submanifold_3x3", "conv_spatial_3x3_s2", "pool_mmm",
                                  "batchnorm_train", "lsfe_block", "detection_loss"])
def test_selected_cases_pass(name):
    r = grad_check(_case(name), seed=1)
    assert r.passed, r.errors


def test_corrupted_weight_gradient_fails(monkeypatch):
    real = conv_mod.conv_backward

    def doubled(entry, grad_out):
        gx, gw, gb = real(entry, grad_out)
        return gx, 2 * gw, gb

    monkeypatch.setattr(conv_mod, "conv_backward", doubled)
    r = grad_check(_case("conv_submanifold_3x3"))
    assert not r.passed
    assert r.errors["weight"] > 0.1


def _kinked(rng):
    x = np.zeros(3)

    def fwd(tape):
        return relu(x, tape)
    return {"input": x}, fwd


def test_persistent_kink_raises():
    with pytest.raises(NonDifferentiablePoint):
        grad_check(GradCase("kink", _kinked, None))


def test_report_rows(tmp_path):
    reports = run_suite(names=["linear", "relu"])
    path = tmp_path / "r.csv"
    write_report(reports, path)
    rows = list(csv.DictReader(open(path)))
    assert [r["check"] for r in rows] == ["linear", "relu"]
    assert all(r["passed"] == "1" for r in rows)


def test_registry_covers_blocks():
    names = {c.name for c in registered_cases()}
    for required in ("lsfe_block", "dlsfe_block", "msfe_module", "convnext_block", "head",
                     "full_network", "voxel2pillar_encoder", "fuse_last_three", "neck"):
        assert required in names


def test_tape_accumulates_shared_inputs():
    x = np.array([1.0, -2.0])
    tape = Tape()
    y = add(x, x, tape=tape)
    tape.backward(y, np.ones(2))
    np.testing.assert_array_equal(tape.grad(x), [2.0, 2.0])
