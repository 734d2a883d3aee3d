"""End-to-end command-line tests, run in process through ``main``."""

import json
import re

import numpy as np
import pytest

import cgrseg.blocks
from cgrseg.cli import _PALETTE, main
from cgrseg.data import gen_toy_sample
from cgrseg.model import ModelConfig, init_model_params, named_tensors
from cgrseg.netpbm import read_pgm, write_ppm
from cgrseg.tensor import Rng, Tensor, record
from cgrseg.weights import load_weights, model_weight_rows, save_weights

TINY = {
    "model": {
        "num_classes": 3,
        "stage_channels": [3, 4, 5, 6],
        "head_width": 8,
        "input_size": [64, 64],
    },
    "train": {
        "steps": 2,
        "batch_size": 2,
        "eval_interval": 5,
        "eval_samples": 2,
    },
}


@pytest.fixture(scope="module")
def tiny_cfg(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "tiny.json"
    p.write_text(json.dumps(TINY))
    return str(p)


@pytest.fixture(scope="module")
def trained(tiny_cfg, tmp_path_factory):
    d = tmp_path_factory.mktemp("train")
    weights, log = str(d / "w.cgrw"), str(d / "train.log")
    rc = main(["--config", tiny_cfg, "train-toy", "--out", weights,
               "--log", log])
    assert rc == 0
    return {"weights": weights, "log": log, "cfg": tiny_cfg}


# ---------------------------------------------------------------- flops


def _total_macs(text):
    m = re.search(r"^total\b.*?(\d[\d,]*)", text, re.MULTILINE)
    assert m, text
    return int(m.group(1).replace(",", ""))


def test_flops_prints_ledger(capsys):
    assert main(["flops"]) == 0
    out = capsys.readouterr().out
    for name in ("stem.0", "pyramid", "sfr.8", "head", "total"):
        assert name in out


def test_flops_size_quadruples_with_side_doubling(capsys):
    assert main(["flops", "--size", "128x128"]) == 0
    small = _total_macs(capsys.readouterr().out)
    assert main(["flops", "--size", "256x256"]) == 0
    big = _total_macs(capsys.readouterr().out)
    # everything except the head's fixed per-image work scales by 4
    assert small * 4 - 3 * 256 == big


def test_flops_respects_config(tiny_cfg, capsys):
    assert main(["--config", tiny_cfg, "flops"]) == 0
    tiny = _total_macs(capsys.readouterr().out)
    assert main(["flops", "--size", "128x128"]) == 0
    full = _total_macs(capsys.readouterr().out)
    assert tiny < full  # 3..6-channel model at 64x64 is far smaller


def test_flops_bad_size_is_usage_error(capsys):
    assert main(["flops", "--size", "512"]) == 1
    assert "512x512" in capsys.readouterr().err


# ------------------------------------------------------------ gradcheck


def test_gradcheck_passes_and_flags_commute(capsys):
    assert main(["--seed", "3", "gradcheck"]) == 0
    first = capsys.readouterr().out
    lines = first.strip().splitlines()
    assert [ln.split()[0] for ln in lines] == ["rca", "rcm", "dpg", "model"]
    assert all("pass" in ln and "worst_rel=" in ln for ln in lines)
    # the global flag is accepted after the subcommand too, identically
    assert main(["gradcheck", "--seed", "3"]) == 0
    assert capsys.readouterr().out == first


def test_gradcheck_catches_corrupted_backward(monkeypatch, capsys):
    # reroute the attention gate through a sigmoid whose backward is
    # scaled by 1.05: finite differences must disagree and name a tensor
    def crooked_sigmoid(x):
        y = 1.0 / (1.0 + np.exp(-x.data))
        return record(Tensor(y), (x,), lambda g: (g * y * (1.0 - y) * 1.05,))

    monkeypatch.setattr(cgrseg.blocks, "sigmoid", crooked_sigmoid)
    assert main(["gradcheck"]) == 2
    out = capsys.readouterr().out
    by_name = {ln.split()[0]: ln for ln in out.strip().splitlines()
               if not ln.startswith("gradient")}
    for name in ("rca", "rcm", "model"):  # every sigmoid user fails
        assert "FAIL" in by_name[name]
        assert "at none" not in by_name[name]  # a parameter is named
    assert "pass" in by_name["dpg"]  # the head has no sigmoid
    assert "gradient check failed" in out


# ------------------------------------------------------------ train-toy


def test_train_writes_weights_and_log(trained, capsys):
    loaded = load_weights(trained["weights"])
    cfg = ModelConfig(**{**TINY["model"],
                         "stage_channels": tuple(TINY["model"]["stage_channels"]),
                         "input_size": tuple(TINY["model"]["input_size"])})
    registry = [n for n, _, _ in named_tensors(init_model_params(Rng(0), cfg))]
    assert list(loaded) == registry
    with open(trained["log"], encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    assert len(lines) == TINY["train"]["steps"]
    assert all(re.match(r"step=\d+ lr=[\d.e+-]+ loss=[\d.e+-]+", ln)
               for ln in lines)
    assert re.search(r"miou=\d\.\d{6}$", lines[-1])  # last step evaluates


def test_train_repeat_is_byte_identical(trained, tiny_cfg, tmp_path, capsys):
    weights2, log2 = str(tmp_path / "w2.cgrw"), str(tmp_path / "l2.log")
    assert main(["--config", tiny_cfg, "train-toy", "--out", weights2,
                 "--log", log2]) == 0
    assert "final miou=" in capsys.readouterr().out
    with open(trained["weights"], "rb") as a, open(weights2, "rb") as b:
        assert a.read() == b.read()
    with open(trained["log"], "rb") as a, open(log2, "rb") as b:
        assert a.read() == b.read()


def test_train_seed_override_changes_weights(trained, tiny_cfg, tmp_path,
                                             capsys):
    weights2 = str(tmp_path / "w2.cgrw")
    assert main(["--config", tiny_cfg, "--seed", "5", "train-toy",
                 "--out", weights2]) == 0
    capsys.readouterr()
    with open(trained["weights"], "rb") as a, open(weights2, "rb") as b:
        assert a.read() != b.read()


def test_train_without_log_prints_steps(tiny_cfg, tmp_path, capsys):
    out_path = str(tmp_path / "w.cgrw")
    assert main(["--config", tiny_cfg, "train-toy", "--out", out_path]) == 0
    out = capsys.readouterr().out
    assert out.startswith("step=0 ")
    assert "final miou=" in out


def test_train_zero_steps_writes_initial_weights(tmp_path, capsys):
    cfg = {**TINY, "train": {**TINY["train"], "steps": 0}}
    cfg_path = tmp_path / "zero.json"
    cfg_path.write_text(json.dumps(cfg))
    out_path = tmp_path / "w.cgrw"
    assert main(["--config", str(cfg_path), "train-toy",
                 "--out", str(out_path)]) == 0
    assert "final miou=" in capsys.readouterr().out

    mcfg = ModelConfig(**{**TINY["model"],
                          "stage_channels": tuple(TINY["model"]["stage_channels"]),
                          "input_size": tuple(TINY["model"]["input_size"])})
    init = init_model_params(Rng(0).spawn(1), mcfg)
    expect = tmp_path / "init.cgrw"
    save_weights(str(expect), model_weight_rows(init))
    assert out_path.read_bytes() == expect.read_bytes()


def test_train_divergence_exits_2_and_cleans_up(tmp_path, capsys):
    cfg = {**TINY, "train": {**TINY["train"], "lr": 1e9, "steps": 40}}
    cfg_path = tmp_path / "diverge.json"
    cfg_path.write_text(json.dumps(cfg))
    weights, log = tmp_path / "w.cgrw", tmp_path / "t.log"
    with np.errstate(over="ignore", invalid="ignore"):
        rc = main(["--config", str(cfg_path), "train-toy",
                   "--out", str(weights), "--log", str(log)])
    assert rc == 2
    assert "numerical failure" in capsys.readouterr().err
    assert not weights.exists() and not log.exists()


# ---------------------------------------------------------------- infer


@pytest.fixture(scope="module")
def sample_ppm(tmp_path_factory):
    p = tmp_path_factory.mktemp("img") / "sample.ppm"
    sample = gen_toy_sample(Rng(77), 64, 64, 3)
    write_ppm(str(p), sample.image)
    return str(p)


def test_infer_writes_all_outputs(trained, sample_ppm, tmp_path, capsys):
    mask_p = str(tmp_path / "mask.pgm")
    color_p = str(tmp_path / "color.ppm")
    heat_p = str(tmp_path / "heat.pgm")
    rc = main(["--config", trained["cfg"], "infer",
               "--weights", trained["weights"], "--image", sample_ppm,
               "--out", mask_p, "--color", color_p,
               "--attn", "sfr.8:" + heat_p])
    assert rc == 0
    out = capsys.readouterr().out
    assert f"wrote {mask_p} (64x64, 3 classes)" in out

    mask = read_pgm(mask_p)
    assert mask.shape == (64, 64)
    assert mask.max() < 3

    with open(color_p, "rb") as fh:
        raw = fh.read()
    assert raw == b"P6\n64 64\n255\n" + _PALETTE[mask].tobytes()

    heat = read_pgm(heat_p)
    assert heat.shape == (64, 64)


def test_infer_all_background_image_is_mostly_class_0(trained, tmp_path,
                                                      capsys):
    img_p = str(tmp_path / "noise.ppm")
    write_ppm(img_p, Rng(55).uniform((1, 3, 64, 64)))  # no shapes at all
    mask_p = str(tmp_path / "mask.pgm")
    assert main(["--config", trained["cfg"], "infer",
                 "--weights", trained["weights"], "--image", img_p,
                 "--out", mask_p]) == 0
    capsys.readouterr()
    assert (read_pgm(mask_p) == 0).mean() >= 0.90


def test_infer_is_deterministic(trained, sample_ppm, tmp_path, capsys):
    outs = []
    for name in ("a.pgm", "b.pgm"):
        p = tmp_path / name
        assert main(["--config", trained["cfg"], "infer",
                     "--weights", trained["weights"], "--image", sample_ppm,
                     "--out", str(p)]) == 0
        outs.append(p.read_bytes())
    capsys.readouterr()
    assert outs[0] == outs[1]


def test_infer_pads_odd_sizes_only_on_request(trained, tmp_path, capsys):
    img_p = str(tmp_path / "odd.ppm")
    write_ppm(img_p, Rng(5).uniform((1, 3, 100, 100), 0.0, 1.0))
    mask_p = str(tmp_path / "mask.pgm")
    base = ["--config", trained["cfg"], "infer", "--weights",
            trained["weights"], "--image", img_p, "--out", mask_p]
    assert main(base) == 1
    assert "multiple" in capsys.readouterr().err
    assert main(base + ["--pad"]) == 0
    capsys.readouterr()
    assert read_pgm(mask_p).shape == (100, 100)  # cropped back


def test_infer_weight_config_mismatch(trained, sample_ppm, tmp_path, capsys):
    # default config (no --config) is the 4-class full-width model
    rc = main(["infer", "--weights", trained["weights"],
               "--image", sample_ppm, "--out", str(tmp_path / "m.pgm")])
    assert rc == 1
    assert "error:" in capsys.readouterr().err


def test_infer_rejects_bad_attention_requests(trained, sample_ppm, tmp_path,
                                              capsys):
    base = ["--config", trained["cfg"], "infer", "--weights",
            trained["weights"], "--image", sample_ppm,
            "--out", str(tmp_path / "m.pgm")]
    assert main(base + ["--attn", "bogus:" + str(tmp_path / "h.pgm")]) == 1
    assert "unknown stage" in capsys.readouterr().err
    assert main(base + ["--attn", "no-colon"]) == 1
    assert "sfr.8:heatmap.pgm" in capsys.readouterr().err


def test_infer_missing_inputs_exit_1(trained, sample_ppm, tmp_path, capsys):
    assert main(["--config", trained["cfg"], "infer",
                 "--weights", str(tmp_path / "nope.cgrw"),
                 "--image", sample_ppm,
                 "--out", str(tmp_path / "m.pgm")]) == 1
    assert main(["--config", trained["cfg"], "infer",
                 "--weights", trained["weights"],
                 "--image", str(tmp_path / "nope.ppm"),
                 "--out", str(tmp_path / "m.pgm")]) == 1
    capsys.readouterr()


# ---------------------------------------------------------------- usage


def test_usage_errors_exit_1(tmp_path, capsys):
    assert main([]) == 1
    assert main(["no-such-command"]) == 1
    assert main(["train-toy"]) == 1  # --out is required
    assert main(["flops", "--bogus"]) == 1
    err = capsys.readouterr().err
    assert "usage error" in err


def test_bad_config_file_exits_1(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text("{broken")
    assert main(["--config", str(p), "flops"]) == 1
    assert "error:" in capsys.readouterr().err
