import json

import numpy as np
import pytest

from skattn import ModelConfig, build_model, save_checkpoint
from skattn.cli import main


def run(*argv):
    return main(list(argv))


FAST_TRAIN = ["--set", "train.steps=10", "--set", "train.eval_every=0",
              "--set", "data.n_train=64", "--set", "data.n_test=16"]


class TestTrainCommand:
    def test_steps_override_yields_matching_csv(self, tmp_path, capsys):
        out = tmp_path / "run"
        assert run("train", *FAST_TRAIN, "--out", str(out)) == 0
        lines = (out / "runlog.csv").read_text().strip().splitlines()
        assert lines[0] == "step,loss,eval_acc"
        assert len(lines) == 11
        manifest = json.loads((out / "manifest.json").read_text())
        assert "model.skaf" in manifest["artifacts"]
        assert "runlog.csv" in manifest["artifacts"]

    def test_determinism_across_invocations(self, tmp_path):
        out1, out2 = tmp_path / "a", tmp_path / "b"
        assert run("train", *FAST_TRAIN, "--out", str(out1)) == 0
        assert run("train", *FAST_TRAIN, "--out", str(out2)) == 0
        assert (out1 / "runlog.csv").read_bytes() == (out2 / "runlog.csv").read_bytes()
        assert (out1 / "model.skaf").read_bytes() == (out2 / "model.skaf").read_bytes()

    def test_missing_dataset_file_exits_2_naming_path(self, tmp_path, capsys):
        rc = run("train", "--set", "data.images=/nope/missing.idx",
                 "--set", "data.labels=/nope/missing-labels.idx",
                 "--out", str(tmp_path / "x"))
        assert rc == 2
        assert "/nope/missing.idx" in capsys.readouterr().err

    def test_config_file_loaded(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({"train": {"steps": 3},
                                        "data": {"n_train": 32, "n_test": 8}}))
        out = tmp_path / "run"
        assert run("train", "--config", str(cfg_path), "--set", "train.eval_every=0",
                   "--out", str(out)) == 0
        assert len((out / "runlog.csv").read_text().strip().splitlines()) == 4

    def test_unknown_set_path_exits_2(self, tmp_path, capsys):
        rc = run("train", "--set", "train.speed=11", "--out", str(tmp_path / "x"))
        assert rc == 2
        assert "train.speed" in capsys.readouterr().err

    def test_bad_value_type_exits_2(self, tmp_path, capsys):
        rc = run("train", "--set", "train.steps=fast", "--out", str(tmp_path / "x"))
        assert rc == 2
        assert "int" in capsys.readouterr().err

    def test_unknown_flag_rejected(self):
        with pytest.raises(SystemExit) as err:
            run("train", "--turbo")
        assert err.value.code == 2


class TestGradcheckCommand:
    def test_small_grid_all_pass(self, tmp_path):
        out = tmp_path / "gc"
        rc = run("gradcheck", "--mixer", "ska", "--N", "4", "--D", "8",
                 "--heads", "2", "--seeds", "0", "--out", str(out))
        assert rc == 0
        rows = (out / "gradcheck.csv").read_text().strip().splitlines()
        assert rows[0] == "mixer,N,D,heads,seed,param,max_rel_error,status"
        assert all(r.endswith("PASS") for r in rows[1:])

    def test_corrupted_backward_detected(self, tmp_path, capsys):
        out = tmp_path / "gc"
        rc = run("gradcheck", "--mixer", "ska", "--N", "4", "--D", "8",
                 "--heads", "2", "--seeds", "0", "--corrupt-backward", "--out", str(out))
        assert rc == 1
        rows = (out / "gradcheck.csv").read_text().strip().splitlines()
        assert any(r.endswith("FAIL") for r in rows[1:])


class TestCountCommand:
    def test_closed_matches_counted(self, capsys):
        assert run("count", "--mixer", "ska", "--N", "196", "--D", "384", "--bias-free") == 0
        out = capsys.readouterr().out
        assert "closed form match: yes" in out

    def test_kernel_five_warns_and_reports_instrumented(self, capsys):
        assert run("count", "--mixer", "sepconv", "--N", "16", "--D", "8",
                   "--kernel", "5", "--bias-free") == 0
        captured = capsys.readouterr()
        assert "kernel 3" in captured.err
        assert "closed n/a" in captured.out

    def test_flops_convention_2x(self, capsys):
        assert run("count", "--mixer", "mhsa", "--N", "16", "--D", "8", "--bias-free",
                   "--flops-convention", "2x") == 0
        out = capsys.readouterr().out
        assert str(2 * 8192) in out


class TestCurvesCommand:
    def test_reference_row(self, tmp_path):
        out = tmp_path / "cv"
        assert run("curves", "--mode", "vary_N", "--fixed", "256", "--min", "8",
                   "--max", "264", "--step", "8", "--out", str(out)) == 0
        rows = (out / "curves_vary_N.csv").read_text().strip().splitlines()
        assert rows[0] == "x,sepconv,selfattn,ska,cska"
        row256 = next(r for r in rows if r.startswith("256,"))
        x, sep, attn, ska, cska = row256.split(",")
        assert (float(sep), float(attn), float(ska)) == (256.0, 384.0, 320.0)
        assert abs(float(cska) - 277.333) < 1e-2


class TestAttnmapCommand:
    def _checkpoint(self, tmp_path, kind="ska", zero_key=False):
        cfg = ModelConfig(input=(1, 8, 8), patch=2, num_classes=2, mlp_ratio=2.0,
                          stages=[{"kind": kind, "depth": 1, "dim": 8, "heads": 2}])
        model = build_model(cfg, seed=0)
        if zero_key:
            for p in model.named_parameters():
                if p.name.endswith("mixer.key"):
                    p.tensor.data[:] = 0.0
        path = tmp_path / "model.skaf"
        save_checkpoint(model, path)
        return path

    def test_zero_key_yields_uniform_single_gray_pgm(self, tmp_path):
        ckpt = self._checkpoint(tmp_path, zero_key=True)
        out = tmp_path / "maps"
        assert run("attnmap", "--checkpoint", str(ckpt), "--out", str(out)) == 0
        pgms = sorted(out.glob("*.pgm"))
        assert pgms
        blob = pgms[0].read_bytes()
        header_end = blob.index(b"255\n") + 4
        pixels = set(blob[header_end:])
        assert len(pixels) == 1  # uniform attention: one gray level

    def test_csv_rows_sum_to_one(self, tmp_path):
        ckpt = self._checkpoint(tmp_path)
        out = tmp_path / "maps"
        assert run("attnmap", "--checkpoint", str(ckpt), "--out", str(out)) == 0
        for csv_path in out.glob("*.csv"):
            matrix = np.loadtxt(csv_path, delimiter=",")
            assert np.abs(matrix.sum(axis=-1) - 1.0).max() < 1e-6

    def test_sepconv_layers_skipped_with_notice(self, tmp_path, capsys):
        ckpt = self._checkpoint(tmp_path, kind="sepconv")
        out = tmp_path / "maps"
        assert run("attnmap", "--checkpoint", str(ckpt), "--out", str(out)) == 0
        assert "skipped" in capsys.readouterr().out
        assert not list(out.glob("*.pgm"))
        notes = json.loads((out / "manifest.json").read_text())["notes"]
        assert any("sepconv" in n for n in notes)

    def test_missing_checkpoint_exits_2(self, tmp_path, capsys):
        assert run("attnmap", "--checkpoint", str(tmp_path / "nope.skaf"),
                   "--out", str(tmp_path / "m")) == 2


class TestSweepCommand:
    def test_heads_grid(self, tmp_path):
        out = tmp_path / "sw"
        rc = run("sweep", "--heads", "1,2,4", *FAST_TRAIN, "--out", str(out))
        assert rc == 0
        rows = (out / "sweep.csv").read_text().strip().splitlines()
        assert rows[0] == "heads,test_acc,params,flops,seed"
        assert len(rows) == 4
        # params and flops are head-independent; seeds derive from base + index
        params = {r.split(",")[2] for r in rows[1:]}
        flops = {r.split(",")[3] for r in rows[1:]}
        seeds = [int(r.split(",")[4]) for r in rows[1:]]
        assert len(params) == 1 and len(flops) == 1
        assert seeds == [0, 1, 2]

    def test_indivisible_heads_exit_2(self, tmp_path, capsys):
        rc = run("sweep", "--heads", "3", *FAST_TRAIN, "--out", str(tmp_path / "sw"))
        assert rc == 2
        assert "divisible" in capsys.readouterr().err


class TestAblateCommand:
    def test_eight_cells_with_normalization_flags(self, tmp_path):
        out = tmp_path / "ab"
        rc = run("ablate", "--set", "train.steps=5", "--set", "train.eval_every=0",
                 "--set", "data.n_train=32", "--set", "data.n_test=16",
                 "--out", str(out))
        assert rc == 0
        rows = (out / "ablate.csv").read_text().strip().splitlines()
        assert len(rows) == 9
        header = rows[0].split(",")
        for row in rows[1:]:
            rec = dict(zip(header, row.split(",")))
            normalized = rec["normalized"] == "True"
            assert normalized == (rec["activation"] == "softmax")
            dev = float(rec["max_row_sum_dev"])
            if normalized:
                assert dev < 1e-9
            else:
                assert dev > 1e-3

    def test_unknown_activation_exits_2(self, tmp_path, capsys):
        rc = run("ablate", "--activations", "swish", "--out", str(tmp_path / "ab"))
        assert rc == 2
        assert "softmax" in capsys.readouterr().err
