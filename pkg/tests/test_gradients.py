import numpy as np
import pytest

from deltaseg import cli, ops
from deltaseg.gradcheck import NonDeterministicError, grad_check
from deltaseg.gradsuite import module_suite, op_suite
from deltaseg.tensor import Tensor


@pytest.mark.parametrize("name,report", op_suite(), ids=lambda v: v if isinstance(v, str) else "")
def test_op_gradients(name, report):
    assert report.passed, report.summary()


@pytest.mark.parametrize("name,report", module_suite(), ids=lambda v: v if isinstance(v, str) else "")
def test_module_gradients(name, report):
    assert report.passed, report.summary()


def test_grad_check_catches_a_wrong_backward():
    x = Tensor(np.random.default_rng(0).standard_normal(5), requires_grad=True, dtype=np.float64)

    def bad_square(t):
        return Tensor._make(t.data ** 2, (t,), lambda g: (g * t.data,))  # missing factor 2

    rep = grad_check(lambda: ops.sum(bad_square(x)), [x])
    assert not rep.passed and rep.worst > 0.3


def test_grad_check_rejects_float32_and_randomness():
    with pytest.raises(TypeError):
        grad_check(lambda: ops.sum(Tensor(np.ones(2))), [Tensor(np.ones(2, np.float32))])
    x = Tensor(np.ones(3), dtype=np.float64)
    rng = np.random.default_rng(0)
    with pytest.raises(NonDeterministicError):
        grad_check(lambda: ops.sum(ops.dropout(x, 0.5, rng, True)), [x])


def test_cli_gradcheck_passes(capsys):
    assert cli.main(["gradcheck", "--tol", "1e-3"]) == 0
    assert "gradient check: PASS" in capsys.readouterr().out
