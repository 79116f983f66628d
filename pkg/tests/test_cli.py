import io
import json
from contextlib import redirect_stderr, redirect_stdout
from decimal import Decimal

import numpy as np

from tinydet_kit import cli
from tinydet_kit.flops import model_flops
from tinydet_kit.archspec import builtin_arch
from tinydet_kit.kernels import Tensor, tensor_to_blob


def run_cli(*argv):
    out, err = io.StringIO(), io.StringIO()
    with redirect_stdout(out), redirect_stderr(err):
        code = cli.run(list(argv))
    return code, out.getvalue(), err.getvalue()


class TestExitCodes:
    def test_success(self):
        code, out, _ = run_cli("flops", "tinydet-m")
        assert code == 0 and out

    def test_unknown_arch_is_usage_error(self):
        code, out, err = run_cli("flops", "no-such-arch")
        assert code == 2
        assert "no-such-arch" in err

    def test_unknown_subcommand(self):
        code, _, _ = run_cli("frobnicate")
        assert code == 2

    def test_unknown_flag(self):
        code, _, _ = run_cli("flops", "tinydet-m", "--nope")
        assert code == 2

    def test_invalid_config_is_validation_failure(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text(json.dumps({
            "name": "broken", "input_size": 320,
            "backbone": [
                {"kind": "conv2d", "kernel": 3, "stride": 2,
                 "in_channels": 3, "out_channels": 24},
                {"kind": "conv2d", "kernel": 3, "stride": 1,
                 "in_channels": 99, "out_channels": 24},
            ],
            "fpn_levels": [], "rpn": {"anchor_sizes": []}, "rcnn": {},
        }))
        code, _, err = run_cli("flops", str(path))
        assert code == 1
        assert "chaining" in err

    def test_gtmr_without_objects(self, tmp_path):
        path = tmp_path / "none.json"
        path.write_text(json.dumps({"images": [], "annotations": []}))
        code, _, err = run_cli("anchors", "gtmr", "tinydet-m",
                               "--boxes", str(path))
        assert code == 1
        assert "undefined" in err.lower()


class TestFlopsCommand:
    def test_final_line(self):
        code, out, _ = run_cli("flops", "tinydet-m")
        assert code == 0
        final = out.strip().splitlines()[-1]
        assert final.startswith("total 991 MFLOPs; allocation "
                                "backbone 71% / fpn 16% / rpn 7% / rcnn 7%")
        assert "sum to 101" in final

    def test_component_totals_in_table(self):
        _, out, _ = run_cli("flops", "tinydet-s")
        totals = [line for line in out.splitlines() if "in total" in line]
        assert len(totals) == 4
        assert totals[0].split()[-1] == "347.48"

    def test_json_round_trip(self):
        _, out, _ = run_cli("flops", "tinydet-m", "--format", "json")
        doc = json.loads(out)
        report = model_flops(builtin_arch("tinydet-m"))
        assert [row["flops"] for row in doc["layers"]] == \
            [r.count.exact for r in report.rows]
        assert [Decimal(row["mflops"]) for row in doc["layers"]] == \
            [r.count.mflops_2dp for r in report.rows]
        assert doc["total"]["flops"] == report.total.exact
        assert doc["components"]["backbone"]["percent"] == 71

    def test_csv_lossless(self):
        _, out, _ = run_cli("flops", "tinydet-l", "--format", "csv")
        import csv as csvmod
        rows = list(csvmod.reader(io.StringIO(out)))
        assert rows[0] == ["component", "label", "flops", "mflops"]
        report = model_flops(builtin_arch("tinydet-l"))
        layer_rows = rows[1:1 + len(report.rows)]
        assert [int(r[2]) for r in layer_rows] == \
            [r.count.exact for r in report.rows]


class TestAlignCommand:
    def test_footer(self):
        code, out, _ = run_cli("align", "tinydet-m")
        assert code == 0
        assert out.strip().splitlines()[-1] == "total 31.5 px, ratio 0.098"

    def test_insert_pools_footer(self):
        _, out, _ = run_cli("align", "tinydet-m", "--insert-pools")
        assert out.strip().splitlines()[-1] == "total 0.0 px, ratio 0.000"

    def test_json(self):
        _, out, _ = run_cli("align", "tinydet-m", "--format", "json")
        doc = json.loads(out)
        assert [s["contribution_px"] for s in doc["steps"]] == \
            [0.5, 1.0, 2.0, 4.0, 8.0, 16.0]
        assert doc["total_px"] == 31.5


class TestAnchorsCommands:
    def test_gtmr_table(self, coco_path):
        code, out, _ = run_cli("anchors", "gtmr", "tinydet-m",
                               "--boxes", str(coco_path))
        assert code == 0
        assert "overall" in out and "small" in out

    def test_gtmr_surrogate(self, coco_path):
        code, out, _ = run_cli("anchors", "gtmr", "thundernet-surrogate",
                               "--boxes", str(coco_path), "--format", "json")
        assert code == 0
        doc = json.loads(out)
        assert doc["grid"] == "thundernet-surrogate"
        assert doc["anchors"] == 20 * 20 * 5 * 3

    def test_coverage(self, grid16_arch_path):
        code, out, _ = run_cli("anchors", "coverage", str(grid16_arch_path),
                               "--object", "12.8x12.8", "--threshold", "0.5",
                               "--resolution", "8")
        assert code == 0
        assert "covered fraction" in out

    def test_coverage_pgm(self, grid16_arch_path, tmp_path):
        mask = tmp_path / "mask.pgm"
        code, _, _ = run_cli("anchors", "coverage", str(grid16_arch_path),
                             "--object", "12.8x12.8", "--threshold", "0.5",
                             "--resolution", "8", "--mask-out", str(mask))
        assert code == 0
        lines = mask.read_text().splitlines()
        assert lines[0] == "P2"
        assert lines[2] == "8 8"
        assert lines[3] == "1"
        assert len(lines) == 4 + 8


class TestForward:
    def test_shape_log(self, toy_arch_path):
        code, out, _ = run_cli("forward", str(toy_arch_path), "--seed", "3")
        assert code == 0
        lines = out.splitlines()
        assert lines[0].startswith("backend ")
        assert "1x3x16x16" in out
        assert "1x6x4x4" in out
        assert lines[-1].startswith("output sum ")

    def test_blob_input(self, toy_arch_path, tmp_path):
        rng = np.random.default_rng(9)
        blob = tensor_to_blob(Tensor(rng.uniform(size=(1, 3, 16, 16))))
        path = tmp_path / "in.blob"
        path.write_bytes(blob)
        code, out, _ = run_cli("forward", str(toy_arch_path),
                               "--input", str(path))
        assert code == 0

    def test_blob_shape_mismatch(self, toy_arch_path, tmp_path):
        blob = tensor_to_blob(Tensor(np.zeros((1, 3, 8, 8))))
        path = tmp_path / "in.blob"
        path.write_bytes(blob)
        code, _, err = run_cli("forward", str(toy_arch_path),
                               "--input", str(path))
        assert code == 1
        assert "does not match" in err


class TestFuseCheck:
    def test_pass(self):
        code, out, _ = run_cli("fuse-check", "--kernel", "5", "--size", "16",
                               "--seed", "7")
        assert code == 0
        assert "PASS" in out

    def test_bad_size(self):
        code, _, err = run_cli("fuse-check", "--kernel", "3", "--size", "15")
        assert code == 2

    def test_json(self):
        _, out, _ = run_cli("fuse-check", "--kernel", "1", "--size", "8",
                            "--format", "json")
        doc = json.loads(out)
        assert doc["passed"] is True
        assert doc["max_abs_diff"] <= 1e-9


class TestOutputPlumbing:
    def test_out_file(self, tmp_path):
        path = tmp_path / "report.txt"
        code, out, _ = run_cli("flops", "tinydet-s", "--out", str(path))
        assert code == 0
        assert out == ""
        assert "in total" in path.read_text()

    def test_format_env_default(self, monkeypatch):
        monkeypatch.setenv("TINYDET_KIT_FORMAT", "json")
        _, out, _ = run_cli("align", "tinydet-m")
        assert json.loads(out)["total_px"] == 31.5

    def test_bad_env_ignored(self, monkeypatch):
        monkeypatch.setenv("TINYDET_KIT_FORMAT", "yaml")
        code, out, _ = run_cli("align", "tinydet-m")
        assert code == 0
        assert out.startswith("layer")

    def test_explicit_format_beats_env(self, monkeypatch):
        monkeypatch.setenv("TINYDET_KIT_FORMAT", "json")
        _, out, _ = run_cli("align", "tinydet-m", "--format", "table")
        assert out.startswith("layer")


class TestDeterminism:
    def test_every_subcommand_reproducible(self, toy_arch_path,
                                           grid16_arch_path, coco_path,
                                           tmp_path):
        invocations = [
            ("flops", "tinydet-m"),
            ("flops", "tinydet-s", "--format", "json"),
            ("align", "tinydet-l", "--insert-pools"),
            ("anchors", "gtmr", "tinydet-s", "--boxes", str(coco_path),
             "--format", "csv"),
            ("anchors", "coverage", str(grid16_arch_path),
             "--object", "12.8x12.8", "--threshold", "0.5",
             "--resolution", "8"),
            ("forward", str(toy_arch_path), "--seed", "0"),
            ("fuse-check", "--kernel", "3", "--size", "12", "--seed", "5",
             "--format", "json"),
        ]
        for argv in invocations:
            first = run_cli(*argv)
            second = run_cli(*argv)
            assert first == second, argv
            assert first[0] == 0, argv
