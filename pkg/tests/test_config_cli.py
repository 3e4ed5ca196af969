"""Config parsing, CLI exit codes, the verify command's report, and a
mutation test proving a broken kernel is actually caught."""
import os

import numpy as np
import pytest

from roikit import verify
from roikit.cli import EXIT_INVARIANT, EXIT_OK, EXIT_USAGE, main
from roikit.config import ConfigError, echo_config, read_config_file, resolve
from roikit.model import Ablations, roi_size


# -- config --------------------------------------------------------------------

def test_read_config_file(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("steps = 100   # short run\n\n# full-line comment\nlr=0.5\n")
    assert read_config_file(str(p)) == {"steps": "100", "lr": "0.5"}


def test_read_config_file_errors_carry_line_numbers(tmp_path):
    p = tmp_path / "bad.cfg"
    p.write_text("ok = 1\nnot a pair\n")
    with pytest.raises(ConfigError, match=":2:"):
        read_config_file(str(p))


def test_resolve_precedence_defaults_file_flags():
    schema = {"steps": (int, 10), "lr": (float, 0.1), "name": (str, "x")}
    cfg = resolve(schema, {"steps": "20"}, {"lr": 0.5, "name": None})
    assert cfg == {"steps": 20, "lr": 0.5, "name": "x"}


def test_resolve_rejects_unknown_key():
    with pytest.raises(ConfigError, match="unknown config key"):
        resolve({"a": (int, 1)}, {"b": "2"})
    with pytest.raises(ConfigError, match="unknown config key"):
        resolve({"a": (int, 1)}, {}, {"b": 2})


def test_resolve_rejects_untypable_value():
    with pytest.raises(ConfigError, match="bad value"):
        resolve({"a": (int, 1)}, {"a": "many"})


def test_echo_config_round_trips(tmp_path):
    path = echo_config({"b": 2, "a": "hi"}, str(tmp_path))
    assert read_config_file(path) == {"a": "hi", "b": "2"}


# -- ablation names and roi schedule ---------------------------------------------

def test_ablations_from_names():
    ab = Ablations.from_names(["no-self-attn", "no-reg"])
    assert ab.no_self_attn and ab.no_reg and not ab.local_coord


def test_ablations_unknown_name_raises():
    with pytest.raises(ValueError):
        Ablations.from_names(["no-such-thing"])


def test_roi_schedule_values():
    assert {s: roi_size(s) for s in (64, 32, 16, 8)} == {64: 25, 32: 19, 16: 13, 8: 7}


def test_roi_schedule_single_scale_and_floor():
    assert roi_size(64, single_scale=True) == 7
    with pytest.raises(ValueError):
        roi_size(3)


# -- CLI ------------------------------------------------------------------------

def test_cli_verify_passes_and_prints_one_line_per_check(capsys):
    rc = main(["verify", "--filter", "hungarian"])
    out = capsys.readouterr().out
    assert rc == EXIT_OK
    assert out.count("PASS") == 1 and "hungarian" in out


def test_cli_verify_unknown_filter_is_usage_error(capsys):
    rc = main(["verify", "--filter", "zzz-no-such-check"])
    assert rc == EXIT_USAGE


def test_cli_unknown_command_is_usage_error():
    assert main(["frobnicate"]) == EXIT_USAGE


def test_cli_eval_missing_checkpoint_is_usage_error(tmp_path, capsys):
    rc = main(["eval", "--checkpoint", str(tmp_path / "nope.bin"),
               "--out", str(tmp_path / "out")])
    assert rc == EXIT_USAGE


def test_cli_train_rejects_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("stps = 10\n")
    rc = main(["train", "--config", str(cfg), "--out", str(tmp_path / "out")])
    assert rc == EXIT_USAGE
    assert "unknown config key" in capsys.readouterr().err


def test_cli_bench_writes_artifacts(tmp_path, capsys):
    cfg = tmp_path / "bench.cfg"
    cfg.write_text("sizes = 16\nn = 2\nr = 5\nc = 8\nL = 2\nrepeats = 1\n")
    out = tmp_path / "out"
    rc = main(["bench", "--config", str(cfg), "--out", str(out)])
    assert rc == EXIT_OK
    assert (out / "bench.csv").exists()
    assert (out / "effective_config.txt").exists()


def test_cli_train_then_eval_and_demo_small(tmp_path, capsys):
    run = tmp_path / "run"
    cfg = tmp_path / "train.cfg"
    cfg.write_text("image_size = 16\nsteps = 2\nbatch_size = 2\n"
                   "capacity = 2\nn_max = 2\nlog_every = 1\n")
    assert main(["train", "--config", str(cfg), "--out", str(run)]) == EXIT_OK
    ckpt = str(run / "checkpoint.bin")

    ecfg = tmp_path / "eval.cfg"
    ecfg.write_text("image_size = 16\nscenes = 2\nddim_steps = 2\n"
                    "sample_batch = 2\nn_max = 2\n")
    out = tmp_path / "eval"
    assert main(["eval", "--checkpoint", ckpt, "--config", str(ecfg),
                 "--out", str(out)]) == EXIT_OK
    body = (out / "eval_metrics.csv").read_text()
    assert body.splitlines()[0] == "track,n_instances,size_bucket,mIoU,acc_color,acc_shape,success_rate"

    dcfg = tmp_path / "demo.cfg"
    dcfg.write_text("image_size = 16\nddim_steps = 2\n")
    gallery = tmp_path / "gallery"
    assert main(["demo", "--checkpoint", ckpt, "--config", str(dcfg),
                 "--out", str(gallery)]) == EXIT_OK
    for name in ("grid", "occlusion", "wide"):
        assert (gallery / f"{name}.ppm").exists()


def test_cli_eval_is_deterministic(tmp_path, capsys):
    run = tmp_path / "run"
    cfg = tmp_path / "train.cfg"
    cfg.write_text("image_size = 16\nsteps = 2\nbatch_size = 2\n"
                   "capacity = 2\nn_max = 2\nlog_every = 1\n")
    main(["train", "--config", str(cfg), "--out", str(run)])
    ecfg = tmp_path / "eval.cfg"
    ecfg.write_text("image_size = 16\nscenes = 2\nddim_steps = 2\n"
                    "sample_batch = 2\nn_max = 2\n")
    outs = []
    for sub in ("a", "b"):
        out = tmp_path / sub
        main(["eval", "--checkpoint", str(run / "checkpoint.bin"),
              "--config", str(ecfg), "--out", str(out)])
        outs.append((out / "eval_metrics.csv").read_text())
    assert outs[0] == outs[1]


# -- mutation test ----------------------------------------------------------------

def test_broken_unpool_is_caught_by_verify():
    # A sign-flipped unpool must fail the oracle comparison and the
    # round-trip identities; this guards the verifier itself against
    # silently passing everything.
    from roikit import tensor as T
    from roikit.roi_ops import roi_unpool

    def broken(roi, boxes, h, w):
        out, occ = roi_unpool(roi, boxes, h, w)
        return T.scale(out, -1.0), occ

    results = verify.run_all(unpool_fn=broken)
    failed = {name for name, ok, _ in results if not ok}
    assert "dense-oracle forward+vjp" in failed
    assert "round-trip identity" in failed
    # The unbroken checks still pass: the mutation is localized.
    assert "hungarian brute force" not in failed


def test_broken_align_is_caught_by_dense_oracle():
    # Even a 1-ulp-scale perturbation trips the bit-exact oracle comparison.
    from roikit import tensor as T
    from roikit.roi_ops import roi_align

    def broken(feature, boxes, r):
        return T.scale(roi_align(feature, boxes, r), 1.0 + 1e-9)

    results = verify.run_all(align_fn=broken)
    failed = {name for name, ok, _ in results if not ok}
    assert "dense-oracle forward+vjp" in failed


def test_broken_kernel_fails_cli_verify_with_nonzero_exit(capsys, monkeypatch):
    from roikit import tensor as T
    from roikit.roi_ops import roi_unpool

    def broken(roi, boxes, h, w):
        out, occ = roi_unpool(roi, boxes, h, w)
        return T.scale(out, -1.0), occ

    original = verify.run_all
    monkeypatch.setattr(verify, "run_all",
                        lambda name_filter=None: original(name_filter=name_filter,
                                                          unpool_fn=broken))
    rc = main(["verify"])
    captured = capsys.readouterr()
    assert rc == EXIT_INVARIANT
    assert "FAIL" in captured.out
    assert "dense-oracle" in captured.err
