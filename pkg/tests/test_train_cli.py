import math

import numpy as np
import pytest
from PIL import Image

from deltaseg import cli
from deltaseg.checkpoint import CheckpointError, load_checkpoint, read_header, save_checkpoint
from deltaseg.config import build_run_config, load_run_config, parse_config_text
from deltaseg.data import default_palette, make_synthetic_dataset, synthetic_class_names, write_dataset
from deltaseg.network import ModelConfig, build_model
from deltaseg.nn import Parameter
from deltaseg.optim import OptimState, adamw_step, cosine_lr
from deltaseg.tensor import Tensor, no_grad
from deltaseg.train import RunConfig, evaluate, evaluate_samples, predict, train


def tiny_cfg(tmp_path, **kw):
    model = ModelConfig(num_classes=3, input_size=(32, 32), variant="full", width_multiplier=0.125)
    base = dict(epochs=1, batch_size=4, seed=0, augment=False, out_dir=str(tmp_path / "run"), model=model)
    base.update(kw)
    return RunConfig(**base)


# -- optimizer -------------------------------------------------------------------------


def test_adamw_first_step_closed_form():
    p = Parameter(np.array([0.5]), dtype=np.float64)
    p.grad = np.array([1.0])
    adamw_step([("p", p)], OptimState(lr=1e-3, weight_decay=0.0))
    assert p.data[0] == pytest.approx(0.5 - 1e-3 / (1 + 1e-8), rel=1e-15)


def test_adamw_zero_grad_cases():
    p = Parameter(np.array([2.0, -3.0]), dtype=np.float64)
    p.grad = np.zeros(2)
    adamw_step([("p", p)], OptimState(lr=1e-3, weight_decay=0.0))
    np.testing.assert_array_equal(p.data, [2.0, -3.0])
    q = Parameter(np.array([2.0, -3.0]), dtype=np.float64)
    q.grad = np.zeros(2)
    adamw_step([("q", q)], OptimState(lr=1e-3, weight_decay=1e-5))
    np.testing.assert_array_equal(q.data, np.array([2.0, -3.0]) * (1 - 1e-3 * 1e-5))


def test_adamw_without_decay_equals_adam():
    rng = np.random.default_rng(0)
    p = Parameter(rng.standard_normal(5), dtype=np.float64)
    ref = p.data.copy()
    m = v = np.zeros(5)
    st = OptimState(lr=1e-2, weight_decay=0.0)
    for t in range(1, 21):
        g = rng.standard_normal(5)
        p.grad = g
        adamw_step([("p", p)], st)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 1e-2 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p.data, ref, rtol=1e-13)


def test_adamw_nan_names_parameter():
    p = Parameter(np.zeros(2), dtype=np.float64)
    p.grad = np.array([np.nan, 0.0])
    with pytest.raises(FloatingPointError, match="enc1.weight"):
        adamw_step([("enc1.weight", p)], OptimState())


def test_cosine_schedule():
    assert cosine_lr(0, 100, 1e-3) == 1e-3
    assert cosine_lr(100, 100, 1e-3, 1e-5) == pytest.approx(1e-5)
    assert cosine_lr(50, 100, 1e-3, 1e-5) == pytest.approx((1e-3 + 1e-5) / 2)
    lrs = [cosine_lr(s, 37, 1e-3) for s in range(38)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(ValueError):
        cosine_lr(101, 100, 1e-3)


# -- training --------------------------------------------------------------------------


def test_step_count_matches_batches(tmp_path):
    samples = make_synthetic_dataset(10, 3, 32, seed=0)
    res = train(tiny_cfg(tmp_path), samples, write_files=False)
    assert [r["step"] for r in res.step_log] == [0, 1, 2]


def test_logs_and_checkpoints_written(tmp_path):
    samples = make_synthetic_dataset(4, 3, 32, seed=0)
    cfg = tiny_cfg(tmp_path, epochs=2)
    res = train(cfg, samples, val_samples=samples[:2], class_names=synthetic_class_names(3))
    out = tmp_path / "run"
    lines = (out / "train_log.csv").read_text().splitlines()
    assert lines[0] == "step,lr,total_loss,ce,dice,focal"
    assert len(lines) == 3
    assert (out / "val_log.csv").read_text().splitlines()[0].startswith("epoch,val_defect_miou")
    assert res.best_checkpoint.exists() and res.last_checkpoint.exists()
    assert read_header(res.last_checkpoint)["meta"]["class_names"] == synthetic_class_names(3)


def test_config_validation():
    with pytest.raises(ValueError):
        RunConfig(epochs=0).validate()
    with pytest.raises(ValueError):
        RunConfig(lr0=1e-5, eta_min=1e-4).validate()


# -- checkpoints ---------------------------------------------------------------------------


def test_checkpoint_round_trip_bitwise(tmp_path):
    model = build_model(ModelConfig(num_classes=3, input_size=(32, 32), width_multiplier=0.125, seed=4))
    x = Tensor(np.random.default_rng(1).uniform(0, 1, (1, 3, 32, 32)).astype(np.float32))
    model.train()
    model(x)  # move running statistics off their init
    model.eval()
    with no_grad():
        before = model(x).primary_logits.data
    path = save_checkpoint(tmp_path / "m.npz", model, {"note": "x"})
    loaded, header = load_checkpoint(path)
    with no_grad():
        after = loaded(x).primary_logits.data
    np.testing.assert_array_equal(before, after)
    assert header["meta"]["note"] == "x"


def test_checkpoint_mismatch_lists_names(tmp_path):
    model = build_model(ModelConfig(num_classes=3, input_size=(32, 32), width_multiplier=0.125))
    path = save_checkpoint(tmp_path / "m.npz", model)
    with np.load(path) as z:
        arrays = {k: z[k] for k in z.files}
    arrays.pop("head1.bias")
    arrays["head1.weight"] = arrays["head1.weight"][:2]
    np.savez(tmp_path / "bad.npz", **arrays)
    with pytest.raises(CheckpointError, match="head1.bias") as err:
        load_checkpoint(tmp_path / "bad.npz")
    assert "head1.weight" in str(err.value)


# -- evaluate / predict ------------------------------------------------------------------------


@pytest.fixture
def trained(tmp_path):
    samples = make_synthetic_dataset(4, 3, 32, seed=0)
    root = tmp_path / "data"
    write_dataset(root, "train", samples, synthetic_class_names(3))
    write_dataset(root, "test", samples[:2], synthetic_class_names(3))
    cfg = tiny_cfg(tmp_path, data_root=str(root))
    res = train(cfg)
    return root, res.last_checkpoint


def test_evaluate_repeatable_and_class_mismatch(trained, tmp_path):
    root, ckpt = trained
    a, names = evaluate(ckpt, root, "test")
    b, _ = evaluate(ckpt, root, "test")
    assert a.to_csv(names) == b.to_csv(names)
    (root / "classes.txt").write_text("a\nb\nc\nd\n")
    with pytest.raises(ValueError, match="classes"):
        evaluate(ckpt, root, "test")


def test_background_only_split_reports_undefined(trained):
    root, ckpt = trained
    model, _ = load_checkpoint(ckpt)
    # force an all-background prediction so no defect class appears anywhere
    model.head1.weight.data[:] = 0
    model.head1.bias.data[:] = [10.0, -10.0, -10.0]
    s = make_synthetic_dataset(1, 3, 32, seed=0)[0]
    s.label[:] = 0
    scores, _ = evaluate_samples(model, [s])
    assert math.isnan(scores.defect_miou)
    assert "undefined" in scores.pretty()


def test_predict_outputs(trained, tmp_path):
    root, ckpt = trained
    img = root / "test" / "images"
    paths = sorted(img.glob("*.png"))[:1]
    big = tmp_path / "odd.png"
    Image.open(paths[0]).resize((40, 24)).save(big)
    bad = tmp_path / "broken.png"
    bad.write_bytes(b"not an image")
    out = tmp_path / "pred"
    failed = predict(ckpt, [big, bad], out)
    assert failed == [str(bad)]
    mask = np.asarray(Image.open(out / "odd_mask.png"))
    color = np.asarray(Image.open(out / "odd_color.png"))
    assert mask.shape == (24, 40) and color.shape == (24, 40, 3)
    assert mask.max() < 3
    palette = {tuple(c) for c in default_palette(3)}
    assert {tuple(c) for c in color.reshape(-1, 3)} <= palette


# -- config + CLI ----------------------------------------------------------------------------


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("epochs = 3  # short\nbatch_size = 2\nvariant = v2\ninput_size = 64\nlr0 = 0.002\naugment = false\n")
    cfg = load_run_config(path, {"epochs": 5, "num_classes": 4})
    assert (cfg.epochs, cfg.batch_size, cfg.lr0, cfg.augment) == (5, 2, 0.002, False)
    assert cfg.model.variant == "v2" and cfg.model.input_size == (64, 64) and cfg.model.num_classes == 4
    assert parse_config_text("a = 1") == {"a": "1"}
    with pytest.raises(KeyError):
        build_run_config({"nonsense": "1"})


def test_cli_no_subcommand_exit_2(capsys):
    assert cli.main([]) == 2
    assert "usage" in capsys.readouterr().err


def test_cli_unknown_flag():
    with pytest.raises(SystemExit) as exc:
        cli.main(["params", "--bogus"])
    assert exc.value.code != 0


def test_cli_params_full(capsys):
    assert cli.main(["params", "--variant", "full", "--classes", "7"]) == 0
    assert "within" in capsys.readouterr().out


def test_cli_synth_train_eval_predict(tmp_path, capsys):
    data = tmp_path / "d"
    assert cli.main(["synth", "--classes", "3", "--input-size", "32", "--out", str(data),
                     "--n-train", "4", "--n-val", "2", "--n-test", "2"]) == 0
    assert cli.main(["train", "--data", str(data), "--out", str(tmp_path / "r"), "--epochs", "1",
                     "--batch-size", "4", "--classes", "3", "--input-size", "32", "--width-mult", "0.125"]) == 0
    ckpt = tmp_path / "r" / "last.npz"
    assert cli.main(["eval", "--checkpoint", str(ckpt), "--data", str(data), "--csv"]) == 0
    assert "defect_mean" in capsys.readouterr().out
    img = next((data / "test" / "images").glob("*.png"))
    assert cli.main(["predict", "--checkpoint", str(ckpt), "--out", str(tmp_path / "p"), str(img)]) == 0
    assert cli.main(["predict", "--checkpoint", str(ckpt), "--out", str(tmp_path / "p"), str(tmp_path / "nope.png")]) == 1
