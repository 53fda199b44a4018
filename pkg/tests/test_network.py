import numpy as np
import pytest

from deltaseg.attention import DDAModule, DeltaOperator
from deltaseg.network import ModelConfig, build_model, count_params
from deltaseg.nn import conv_param_count, dsc_param_count
from deltaseg.tensor import Tensor, no_grad


def small(variant="full", size=32, classes=3, **kw):
    return build_model(ModelConfig(num_classes=classes, input_size=(size, size), variant=variant,
                                   width_multiplier=0.125, **kw))


@pytest.mark.parametrize("variant", ["v1", "v2", "full"])
def test_output_shapes_train_and_eval(variant):
    model = small(variant)
    x = Tensor(np.random.default_rng(0).uniform(0, 1, (2, 3, 32, 32)).astype(np.float32))
    out = model(x)
    assert out.primary_logits.shape == (2, 3, 32, 32)
    assert [h.shape[2:] for h in out.heads] == [(32, 32), (16, 16), (8, 8), (8, 8)]
    model.eval()
    with no_grad():
        out = model(x)
    assert out.aux_logits == []


def test_encoder_ladder():
    model = small(size=64)
    model.eval()
    with no_grad():
        feats = model.encoder_forward(Tensor(np.zeros((1, 3, 64, 64), np.float32)))
    assert [f.shape[2] for f in feats] == [64, 32, 16, 16, 16]
    assert [f.shape[1] for f in feats] == model.cfg.widths


def test_skip_modules_per_variant():
    assert isinstance(small("v1").skip3, DeltaOperator)
    full = small("full")
    assert isinstance(full.skip3, DDAModule)
    assert full.skip1.fuse is None and full.skip4.fuse is not None
    assert full.skip2.gate.scale == 2 and full.skip4.gate.scale == 1


def test_input_size_mismatch_raises():
    model = small()
    with pytest.raises(ValueError, match="input spatial size"):
        model(Tensor(np.zeros((1, 3, 48, 48), np.float32)))


def test_decoder_needs_all_skips():
    model = small()
    with pytest.raises(ValueError, match="skips"):
        model.decoder_forward(Tensor(np.zeros((1, 32, 8, 8), np.float32)), [None, None, None, None])


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(variant="v3")
    with pytest.raises(ValueError):
        ModelConfig(input_size=(30, 30))
    with pytest.raises(ValueError):
        ModelConfig(num_classes=1)
    cfg = ModelConfig(width_multiplier=0.25)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_breakdown_sums_to_total():
    total, parts = count_params(small())
    assert total == sum(parts.values())
    assert set(parts) >= {"enc1", "aspp", "skip1", "dec1", "head1"}


def test_param_count_helpers():
    assert conv_param_count(3, 256, 256, bias=False) == 9 * 256 * 256
    assert dsc_param_count(3, 256, 256, bias=False) == 9 * 256 + 256 * 256


def test_same_seed_same_weights():
    a, b = small(seed=3), small(seed=3)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb
        np.testing.assert_array_equal(pa.data, pb.data)
